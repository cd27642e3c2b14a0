"""Adversarial fine-tuning of the visual encoder against EDPA patches.

Each outer iteration draws a minibatch, optionally reinitialises the patch,
takes ``inner_steps`` EDPA ascent steps against the *current* encoder and
then takes one Adam step on

    alpha2 * ||E(v) - E_orig(v)||^2 + (1 - alpha2) * ||E(v (+) delta) - E_orig(v)||^2

Only the visual encoder (positional embeddings included) is trained; the
language encoder and action head stay frozen.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from edpa import autodiff as ad
from edpa.attack import AttackBatch, attack_step, sample_masks
from edpa.encoders import (
    Encoders,
    VisualEncoderParams,
    as_leaves,
    encode_language_batch,
    encode_visual,
    param_arrays,
    with_arrays,
)
from edpa.errors import ConfigError, DivergenceError
from edpa.losses import ObjectiveConfig, finetune_terms, squared_deviation
from edpa.optim import AdamState, adam_step
from edpa.patching import apply_patch_batch, init_patch

log = logging.getLogger(__name__)

__all__ = ["AdamState", "adam_step", "DefenseConfig", "FinetuneResult", "adversarial_finetune", "clean_fidelity"]


@dataclass
class DefenseConfig:
    alpha1: float = 0.8
    alpha2: float = 0.5
    step_size: float = 2.0 / 255.0
    reset_every: int = 250
    inner_steps: int = 1
    lr: float = 1e-3
    iterations: int = 5000
    batch_size: int = 16
    seed: int = 0
    patch_h: int = 14
    patch_w: int = 14
    tau: float = 0.1
    normalize: bool = True
    ema_beta: float = 0.99
    ema_eps: float = 1e-8
    position: str = "random"
    clean_budget: float = 0.05
    log_every: int = 1

    def __post_init__(self):
        if not 0.0 <= self.alpha2 <= 1.0:
            raise ConfigError(f"alpha2 must lie in [0, 1], got {self.alpha2}")
        if self.reset_every < 1:
            raise ConfigError(f"reset frequency must be >= 1, got {self.reset_every}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.iterations < 0 or self.batch_size < 1 or self.inner_steps < 1:
            raise ConfigError("need T >= 0, batch size >= 1 and K >= 1")

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.alpha1, self.tau, self.ema_beta, self.ema_eps, self.normalize)


@dataclass
class FinetuneResult:
    visual: VisualEncoderParams
    log: list[dict] = field(default_factory=list)
    resets: list[int] = field(default_factory=list)


class FinetuneAborted(DivergenceError):
    def __init__(self, message: str, last_good: VisualEncoderParams, log_rows: list[dict]):
        super().__init__(message)
        self.last_good = last_good
        self.log = log_rows


def _copy_visual(v: VisualEncoderParams) -> VisualEncoderParams:
    return with_arrays(v, {k: np.array(a, copy=True) for k, a in param_arrays(v).items()})


def _digest(v: VisualEncoderParams) -> str:
    h = hashlib.sha256()
    for k, a in sorted(param_arrays(v).items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def adversarial_finetune(
    samples: Sequence,
    encoders: Encoders,
    cfg: DefenseConfig,
    on_log: Callable[[dict], None] | None = None,
) -> FinetuneResult:
    samples = list(samples)
    if not samples:
        raise ConfigError("adversarial_finetune: empty dataset")
    orig = encoders.visual
    orig_digest = _digest(orig)
    geom = encoders.geometry
    rng = np.random.default_rng(cfg.seed)
    obj_cfg = cfg.objective()
    ema = obj_cfg.new_ema()

    images = np.stack([s.image for s in samples])

    tokens = encode_language_batch(encoders.language, [s.tokens for s in samples])
    target = encode_visual(orig, images)

    current = _copy_visual(orig)
    params = param_arrays(current)
    state = AdamState()
    pixels = init_patch(rng, cfg.patch_h, cfg.patch_w, geom.channels).pixels
    resets = [0]
    rows: list[dict] = []
    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(0, len(samples), size=cfg.batch_size)
        if it % cfg.reset_every == 0:
            pixels = init_patch(rng, cfg.patch_h, cfg.patch_w, geom.channels).pixels
            resets.append(it)
        masks = sample_masks(rng, len(idx), (geom.height, geom.width), (cfg.patch_h, cfg.patch_w), cfg.position)
        imgs = images[idx]
        batch = AttackBatch(imgs, encode_visual(current, imgs), tokens[idx], idx.tolist())
        try:
            for _ in range(cfg.inner_steps):
                step = attack_step(pixels, batch, current, masks, obj_cfg, ema, cfg.step_size, it)
                pixels = step.pixels
            adv = apply_patch_batch(imgs, pixels, masks)
            leaves = as_leaves(current)
            terms = finetune_terms(leaves, orig, imgs, adv, cfg.alpha2, orig_clean=target[idx])
            loss = terms.loss.item()
            if not np.isfinite(loss):
                raise DivergenceError(f"fine-tuning loss non-finite at iteration {it}: {loss}")
            grads = ad.backward(terms.loss)
            g = {k: grads[getattr(leaves, k)] for k in params if getattr(leaves, k) in grads}
            params, state = adam_step(params, g, state, cfg.lr)
        except DivergenceError as exc:
            raise FinetuneAborted(str(exc), current, rows) from exc
        current = with_arrays(current, params)
        if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.iterations):
            row = {
                "iteration": it,
                "loss": loss,
                "clean_term": terms.clean.item(),
                "adv_term": terms.adversarial.item(),
                "J": step.objective,
                "reset": resets[-1] == it,
            }
            rows.append(row)
            if on_log:
                on_log(row)
    if _digest(orig) != orig_digest:
        raise RuntimeError("original visual encoder was mutated during fine-tuning")
    return FinetuneResult(current, rows, resets)


def clean_fidelity(visual: VisualEncoderParams, visual_orig: VisualEncoderParams, images: np.ndarray) -> float:
    """Mean per-entry squared deviation ||E*(v) - E_orig(v)||^2 / (N d) on clean images."""
    a, b = encode_visual(visual, images), encode_visual(visual_orig, images)
    n, d = a.shape[-2:]
    return float(np.mean(np.sum((a - b) ** 2, axis=(-2, -1)))) / (n * d)


def adversarial_deviation(visual: VisualEncoderParams, visual_orig: VisualEncoderParams, images: np.ndarray, patch, masks) -> float:
    """Mean ||E(v (+) delta) - E_orig(v)||^2 over the images."""
    adv = encode_visual(visual, apply_patch_batch(images, patch, masks))
    return squared_deviation(adv, encode_visual(visual_orig, images)).item()


def save_log(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
