"""Surrogate failure rate, metrics records, transfer runs, ablations and heatmaps."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from edpa.attack import AttackConfig, edpa_attack, sample_masks
from edpa.encoders import Encoders, action_head, encode_language, encode_language_batch, encode_visual
from edpa.errors import ConfigError, ShapeError
from edpa.losses import alignment_shift_loss, patch_contrastive_loss
from edpa.patching import AdvPatch, PlacementMask, apply_patch, apply_patch_batch, gaussian_patch, to_ppm

CONDITIONS = ("clean", "random", "edpa")


@dataclass
class MetricsRecord:
    condition: str
    failure_rate: float
    action_error: float
    diag_cosine: float
    alignment_shift: float
    objective: float
    samples: int
    seed: int
    failures: int = 0
    theta: float = float("nan")
    label: str = ""

    def row(self) -> dict:
        return asdict(self)


@dataclass
class EvalConfig:
    seeds: int = 3
    patch_h: int = 14
    patch_w: int = 14
    position: str = "random"
    fixed_row: int = 0
    fixed_col: int = 0
    tau: float = 0.1
    alpha1: float = 0.8
    target_fr: float = 0.10
    batch_size: int = 256

    def __post_init__(self):
        if self.seeds < 1:
            raise ConfigError(f"need at least one evaluation seed, got {self.seeds}")
        if self.position not in ("random", "fixed"):
            raise ConfigError(f"position must be 'random' or 'fixed', got {self.position!r}")

    def kwargs(self) -> dict:
        return {
            "position": self.position,
            "origin": (self.fixed_row, self.fixed_col),
            "tau": self.tau,
            "alpha1": self.alpha1,
            "batch_size": self.batch_size,
        }


def action_errors(encoders: Encoders, samples: Sequence, images: np.ndarray | None = None) -> np.ndarray:
    imgs = np.stack([s.image for s in samples]) if images is None else images
    P = encode_visual(encoders.visual, imgs)
    W = encode_language_batch(encoders.language, [s.tokens for s in samples])
    pred = action_head(encoders.head, P, W)
    return np.linalg.norm(pred - np.stack([s.action for s in samples]), axis=-1)


def calibrate_failure_threshold(encoders: Encoders, samples: Sequence, target: float = 0.10) -> float:
    """Smallest threshold whose clean failure rate does not exceed ``target``."""
    if not samples:
        raise ConfigError("calibration needs at least one clean sample")
    if not 0.0 < target < 0.5:
        raise ConfigError(f"target clean failure rate must lie in (0, 0.5), got {target}")
    return threshold_for_rate(action_errors(encoders, samples), target)


def threshold_for_rate(errors: np.ndarray, target: float) -> float:
    errs = np.sort(np.asarray(errors, dtype=np.float64))
    allowed = int(math.floor(target * errs.size + 1e-12))
    return float(errs[errs.size - allowed - 1]) if allowed < errs.size else 0.0


def failure_rate(errors: np.ndarray, theta: float) -> float:
    return float(np.count_nonzero(np.asarray(errors) > theta)) / len(errors)


def _mean(values) -> float:
    return math.fsum(float(v) for v in values) / len(values)


def evaluate(
    encoders: Encoders,
    samples: Sequence,
    condition: str,
    patch: AdvPatch | None = None,
    theta: float | None = None,
    seed: int = 0,
    patch_dims: tuple[int, int] | None = None,
    position: str = "random",
    origin: tuple[int, int] = (0, 0),
    tau: float = 0.1,
    alpha1: float = 0.8,
    batch_size: int = 256,
) -> MetricsRecord:
    """Score one condition. Placements (and the random patch) are drawn from ``seed``.

    ``clean`` leaves images untouched, ``random`` draws one clipped-Gaussian
    patch of ``patch_dims`` (or of ``patch``'s dims) and ``edpa`` applies ``patch``.
    """
    if condition not in CONDITIONS:
        raise ConfigError(f"unknown condition {condition!r}")
    samples = list(samples)
    if not samples:
        raise ConfigError("evaluate: empty dataset")
    theta = float(theta if theta is not None else encoders.meta.get("theta_fail", float("nan")))
    if not math.isfinite(theta):
        raise ConfigError("evaluate: failure threshold not calibrated")
    rng = np.random.default_rng(seed)
    geom = encoders.geometry
    if condition == "edpa" and patch is None:
        raise ConfigError("evaluate: condition 'edpa' requires a patch")
    if condition == "random":
        dims = patch_dims or (patch.dims if patch is not None else None)
        if dims is None:
            raise ConfigError("evaluate: condition 'random' requires patch dims")
        patch = gaussian_patch(rng, dims[0], dims[1], geom.channels)

    errs, diag, shift, objs = [], [], [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = np.stack([s.image for s in chunk])
        W = encode_language_batch(encoders.language, [s.tokens for s in chunk])
        P = encode_visual(encoders.visual, images)
        if condition == "clean":
            P_adv = P
        else:
            masks = sample_masks(rng, len(chunk), (geom.height, geom.width), patch.dims, position, origin)
            P_adv = encode_visual(encoders.visual, apply_patch_batch(images, patch.pixels, masks))
        pred = action_head(encoders.head, P_adv, W)
        errs.extend(np.linalg.norm(pred - np.stack([s.action for s in chunk]), axis=-1))
        for b in range(len(chunk)):
            diag.append(_diag_cosine(P[b], P_adv[b]))
            lp = patch_contrastive_loss(P[b], P_adv[b], tau).item()
            la = alignment_shift_loss(P[b], P_adv[b], W[b]).item()
            shift.append(la)
            objs.append(alpha1 * lp + (1 - alpha1) * la)
    errs = np.asarray(errs)
    fails = int(np.count_nonzero(errs > theta))
    return MetricsRecord(
        condition=condition,
        failure_rate=fails / len(samples),
        action_error=_mean(errs),
        diag_cosine=_mean(diag),
        alignment_shift=_mean(shift),
        objective=_mean(objs),
        samples=len(samples),
        seed=seed,
        failures=fails,
        theta=theta,
    )


def _diag_cosine(P: np.ndarray, Q: np.ndarray) -> float:
    num = np.sum(P * Q, axis=-1)
    den = np.maximum(np.linalg.norm(P, axis=-1), 1e-12) * np.maximum(np.linalg.norm(Q, axis=-1), 1e-12)
    return float(np.mean(np.clip(num / den, -1.0, 1.0)))


def mean_record(records: Sequence[MetricsRecord], label: str = "") -> MetricsRecord:
    """Field-wise arithmetic mean over seeds (sample counts are summed)."""
    if not records:
        raise ConfigError("mean_record: nothing to average")
    conds = {r.condition for r in records}
    out = {}
    for f in fields(MetricsRecord):
        vals = [getattr(r, f.name) for r in records]
        if f.name == "condition":
            out[f.name] = conds.pop() if len(conds) == 1 else "mixed"
        elif f.name in ("samples", "failures"):
            out[f.name] = int(sum(vals))
        elif f.name == "seed":
            out[f.name] = -1
        elif f.name == "label":
            out[f.name] = label or records[0].label
        else:
            out[f.name] = _mean(vals)
    return MetricsRecord(**out)


def std_failure_rate(records: Sequence[MetricsRecord]) -> float:
    return float(np.std([r.failure_rate for r in records])) if records else float("nan")


def write_csv(path, records: Sequence[MetricsRecord], extra: Sequence[dict] | None = None) -> None:
    rows = [r.row() for r in records]
    if extra:
        rows = [{**e, **r} for e, r in zip(extra, rows)]
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


# -- transfer --------------------------------------------------------------------


def transfer_eval(
    patch: AdvPatch,
    source: tuple[Encoders, Sequence],
    target: tuple[Encoders, Sequence],
    seed: int = 0,
    **kw,
) -> tuple[MetricsRecord, MetricsRecord]:
    """Evaluate a source-trained patch on the source setup and on a target setup."""
    (src_enc, src_data), (tgt_enc, tgt_data) = source, target
    sg, tg = src_enc.geometry, tgt_enc.geometry
    if (sg.height, sg.width, sg.channels) != (tg.height, tg.width, tg.channels):
        raise ShapeError(f"transfer: image dims differ {(sg.height, sg.width, sg.channels)} vs {(tg.height, tg.width, tg.channels)}")
    src = evaluate(src_enc, src_data, "edpa", patch, seed=seed, **kw)
    tgt = evaluate(tgt_enc, tgt_data, "edpa", patch, seed=seed, **kw)
    return replace(src, label="source"), replace(tgt, label="target")


# -- ablations -------------------------------------------------------------------


def side_for_fraction(fraction: float, height: int, width: int) -> int:
    side = int(round(math.sqrt(fraction * height * width)))
    if side < 1:
        raise ShapeError(f"area fraction {fraction} gives a zero-side patch")
    if side > min(height, width):
        raise ShapeError(f"area fraction {fraction} gives side {side} larger than image {height}x{width}")
    return side


def ablate_patch_size(
    encoders: Encoders,
    train: Sequence,
    test: Sequence,
    fractions: Sequence[float],
    base: AttackConfig,
    seeds: Sequence[int] = (0,),
) -> list[MetricsRecord]:
    """One attack per (size, seed); returns the per-size seed-mean records."""
    g = encoders.geometry
    out = []
    for frac in fractions:
        side = side_for_fraction(frac, g.height, g.width)
        per_seed = []
        for s in seeds:
            cfg = replace(base, patch_h=side, patch_w=side, seed=s)
            patch = edpa_attack(train, encoders, cfg).final
            per_seed.append(evaluate(encoders, test, "edpa", patch, seed=s, tau=cfg.tau, alpha1=cfg.alpha1))
        out.append(mean_record(per_seed, label=f"fraction={frac:g};side={side}"))
    return out


def ablate_alpha1(
    encoders: Encoders,
    train: Sequence,
    test: Sequence,
    values: Sequence[float],
    base: AttackConfig,
    seeds: Sequence[int] = (0,),
) -> list[MetricsRecord]:
    out = []
    for a in values:
        if not 0.0 <= a <= 1.0:
            raise ConfigError(f"alpha1 values must lie in [0, 1], got {a}")
        per_seed = []
        for s in seeds:
            cfg = replace(base, alpha1=a, seed=s)
            patch = edpa_attack(train, encoders, cfg).final
            per_seed.append(evaluate(encoders, test, "edpa", patch, seed=s, tau=cfg.tau, alpha1=a))
        out.append(mean_record(per_seed, label=f"alpha1={a:g}"))
    return out


# -- heatmaps --------------------------------------------------------------------


@dataclass
class Heatmap:
    matrix: np.ndarray
    covered_mass: np.ndarray | None = None
    mask: PlacementMask | None = None


def cosine_matrix(P: np.ndarray, W: np.ndarray) -> np.ndarray:
    Pn = P / np.maximum(np.linalg.norm(P, axis=-1, keepdims=True), 1e-12)
    Wn = W / np.maximum(np.linalg.norm(W, axis=-1, keepdims=True), 1e-12)
    return np.clip(Pn @ Wn.T, -1.0, 1.0)


def covered_blocks(mask: PlacementMask, patch_size: int, width: int) -> np.ndarray:
    """Indices of encoder blocks that overlap the mask rectangle."""
    r0, r1 = mask.origin[0] // patch_size, (mask.origin[0] + mask.dims[0] - 1) // patch_size
    c0, c1 = mask.origin[1] // patch_size, (mask.origin[1] + mask.dims[1] - 1) // patch_size
    per_row = width // patch_size
    return np.array([r * per_row + c for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)])


def alignment_heatmap(encoders: Encoders, sample, patch: AdvPatch | None = None, mask: PlacementMask | None = None, seed: int = 0) -> Heatmap:
    """N x M matrix of cos(p_i, w_j); with a patch, the per-token absolute mass on covered blocks."""
    g = encoders.geometry
    W = encode_language(encoders.language, sample.tokens)
    if patch is None:
        return Heatmap(cosine_matrix(encode_visual(encoders.visual, sample.image), W))
    if mask is None:
        mask = sample_masks(np.random.default_rng(seed), 1, (g.height, g.width), patch.dims)[0]
    P = encode_visual(encoders.visual, apply_patch(sample.image, patch, mask))
    C = cosine_matrix(P, W)
    blocks = covered_blocks(mask, g.patch_size, g.width)
    mass = np.abs(C[blocks]).sum(axis=0) / np.abs(C).sum(axis=0).clip(1e-12)
    return Heatmap(C, mass, mask)


def heatmap_pgm(matrix: np.ndarray) -> bytes:
    """Grayscale P5 pixmap, cosine -1 -> 0 and +1 -> 255."""
    q = np.rint((np.clip(matrix, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    h, w = q.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def heatmap_ppm(matrix: np.ndarray) -> bytes:
    return to_ppm((np.clip(matrix, -1.0, 1.0) + 1.0) / 2.0)


def heatmap_difference(a: Heatmap, b: Heatmap) -> float:
    """Mean absolute cell difference between two heatmaps of one sample."""
    if a.matrix.shape != b.matrix.shape:
        raise ShapeError(f"heatmap shapes differ: {a.matrix.shape} vs {b.matrix.shape}")
    return float(np.mean(np.abs(a.matrix - b.matrix)))
