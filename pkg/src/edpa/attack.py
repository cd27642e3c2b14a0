"""Universal patch optimisation by sign-gradient ascent on the EDPA objective."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from edpa import autodiff as ad
from edpa.encoders import Encoders, VisualEncoderParams, encode_language_batch, encode_visual
from edpa.errors import ConfigError, DivergenceError, DomainError
from edpa.losses import EmaState, ObjectiveConfig, edpa_objective_terms
from edpa.patching import AdvPatch, PlacementMask, apply_patch_batch, init_patch, random_position, save_patch

log = logging.getLogger(__name__)


@dataclass
class AttackConfig:
    step_size: float = 2.0 / 255.0
    iterations: int = 2000
    batch_size: int = 16
    inner_steps: int = 1
    patch_h: int = 14
    patch_w: int = 14
    alpha1: float = 0.8
    tau: float = 0.1
    seed: int = 0
    snapshot_every: int = 100
    position: str = "random"
    fixed_row: int = 0
    fixed_col: int = 0
    normalize: bool = True
    ema_beta: float = 0.99
    ema_eps: float = 1e-8
    log_every: int = 1

    def __post_init__(self):
        if self.step_size < 0:
            raise ConfigError(f"step size must be non-negative, got {self.step_size}")
        if self.iterations < 0 or self.batch_size < 1 or self.inner_steps < 1:
            raise ConfigError(f"need T >= 0, B >= 1, K >= 1; got {self.iterations}, {self.batch_size}, {self.inner_steps}")
        if self.position not in ("random", "fixed"):
            raise ConfigError(f"position must be 'random' or 'fixed', got {self.position!r}")
        if self.patch_h < 1 or self.patch_w < 1:
            raise ConfigError(f"patch dims must be positive, got {self.patch_h}x{self.patch_w}")

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.alpha1, self.tau, self.ema_beta, self.ema_eps, self.normalize)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class AttackBatch:
    """Images with their clean patch embeddings and instruction embeddings."""

    images: np.ndarray
    clean: np.ndarray
    tokens: np.ndarray
    ids: list[int] = field(default_factory=list)


def make_batch(samples: Sequence, encoders: Encoders, visual: VisualEncoderParams | None = None, ids=None) -> AttackBatch:
    visual = visual or encoders.visual
    images = np.stack([s.image for s in samples])
    return AttackBatch(
        images,
        encode_visual(visual, images),
        encode_language_batch(encoders.language, [s.tokens for s in samples]),
        list(ids) if ids is not None else list(range(len(samples))),
    )


@dataclass
class StepResult:
    pixels: np.ndarray
    objective: float
    loss_patch: float
    loss_align: float
    grad: np.ndarray


def objective_gradient(pixels: np.ndarray, batch: AttackBatch, visual: VisualEncoderParams, masks, cfg: ObjectiveConfig, ema: EmaState | None, update_ema: bool = True):
    """Objective terms and d(objective)/d(patch) for one batch at fixed placements."""
    patch = ad.leaf(pixels, name="patch")
    adv = encode_visual(visual, apply_patch_batch(batch.images, patch, masks))
    terms = edpa_objective_terms(batch.clean, adv, batch.tokens, cfg, ema, update_ema)
    (grad,) = ad.grad_of(terms.objective, patch)
    return terms, grad


def attack_step(pixels: np.ndarray, batch: AttackBatch, visual: VisualEncoderParams, masks: list[PlacementMask], cfg: ObjectiveConfig, ema: EmaState | None, step_size: float, iteration: int = 0) -> StepResult:
    """One ascent step delta <- clip(delta + step * sign(grad J), 0, 1).

    Returns the updated pixels and J measured before the update.
    """
    try:
        terms, grad = objective_gradient(pixels, batch, visual, masks, cfg, ema)
    except DomainError as exc:
        raise DivergenceError(f"attack objective non-finite at iteration {iteration} (batch ids {batch.ids}): {exc}") from exc
    J = terms.objective.item()
    if not np.isfinite(J) or not np.all(np.isfinite(grad)):
        raise DivergenceError(f"attack objective non-finite at iteration {iteration} (batch ids {batch.ids}): J={J}")
    new = np.clip(pixels + step_size * np.sign(grad), 0.0, 1.0)
    return StepResult(new, J, terms.patch.item(), terms.align.item(), grad)


def sample_masks(rng: np.random.Generator, count: int, image_dims, patch_dims, position: str = "random", origin=(0, 0)) -> list[PlacementMask]:
    if position == "fixed":
        return [PlacementMask(tuple(origin), tuple(patch_dims), tuple(image_dims))] * count
    return [random_position(rng, image_dims, patch_dims) for _ in range(count)]


@dataclass
class PatchTrajectory:
    snapshots: list[tuple[int, AdvPatch, float]] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)

    @property
    def final(self) -> AdvPatch:
        return self.snapshots[-1][1]

    def add(self, iteration: int, patch: AdvPatch, objective: float) -> None:
        if self.snapshots and iteration <= self.snapshots[-1][0]:
            raise ValueError(f"snapshot iteration {iteration} not after {self.snapshots[-1][0]}")
        self.snapshots.append((iteration, patch, objective))

    def save(self, directory) -> None:
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        index = []
        for it, patch, obj in self.snapshots:
            name = f"snapshot_{it:06d}.edt"
            save_patch(root / name, patch, {"iteration": it, "objective": obj})
            index.append({"iteration": it, "file": name, "objective": obj})
        (root / "trajectory.json").write_text(json.dumps(index, indent=1) + "\n", encoding="utf-8")


class AttackAborted(DivergenceError):
    def __init__(self, message: str, trajectory: PatchTrajectory):
        super().__init__(message)
        self.trajectory = trajectory


class _ParamGuard:
    """Fingerprint of the encoder arrays, checked after the attack to prove they were not touched."""

    def __init__(self, encoders: Encoders):
        self._enc = encoders
        self._digest = self._compute()

    def _compute(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self._enc.tensors().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def check(self) -> None:
        if self._compute() != self._digest:
            raise RuntimeError("encoder parameters changed during the attack")


def edpa_attack(samples: Sequence, encoders: Encoders, cfg: AttackConfig, on_log: Callable[[dict], None] | None = None) -> PatchTrajectory:
    """Optimise a universal patch against frozen encoders.

    Each iteration draws a minibatch with replacement, samples one placement
    per image (unless the position is fixed) and takes ``inner_steps`` ascent
    steps at those placements. Snapshots are taken at iteration 0, every
    ``snapshot_every`` iterations and at the end.
    """
    samples = list(samples)
    if not samples:
        raise ConfigError("edpa_attack: empty dataset")
    guard = _ParamGuard(encoders)
    geom = encoders.geometry
    rng = np.random.default_rng(cfg.seed)
    obj_cfg = cfg.objective()
    ema = obj_cfg.new_ema()
    full = make_batch(samples, encoders)
    image_dims = (geom.height, geom.width)
    pdims = (cfg.patch_h, cfg.patch_w)
    prov = f"edpa:{cfg.digest()}"

    pixels = init_patch(rng, cfg.patch_h, cfg.patch_w, geom.channels).pixels
    traj = PatchTrajectory()
    last_J = float("nan")
    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(0, len(samples), size=cfg.batch_size)
        batch = AttackBatch(full.images[idx], full.clean[idx], full.tokens[idx], idx.tolist())
        masks = sample_masks(rng, len(idx), image_dims, pdims, cfg.position, (cfg.fixed_row, cfg.fixed_col))
        for k in range(cfg.inner_steps):
            try:
                step = attack_step(pixels, batch, encoders.visual, masks, obj_cfg, ema, cfg.step_size, it)
            except DivergenceError as exc:
                traj.add(it, AdvPatch(pixels, f"{prov}:aborted@{it}"), last_J)
                raise AttackAborted(str(exc), traj) from exc
            if it == 1 and k == 0:
                traj.add(0, AdvPatch(pixels, f"{prov}:iter=0"), step.objective)
            pixels = step.pixels
            last_J = step.objective
        if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.iterations):
            row = {
                "iteration": it,
                "J": step.objective,
                "L_patch": step.loss_patch,
                "L_align": step.loss_align,
                "ema_patch": ema.averages.get("patch"),
                "ema_align": ema.averages.get("align"),
            }
            traj.log.append(row)
            if on_log:
                on_log(row)
        if it == cfg.iterations or (cfg.snapshot_every and it % cfg.snapshot_every == 0):
            traj.add(it, AdvPatch(pixels, f"{prov}:iter={it}"), last_J)
    if not traj.snapshots:
        traj.add(0, AdvPatch(pixels, f"{prov}:iter=0"), last_J)
    guard.check()
    return traj
