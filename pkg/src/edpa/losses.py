"""Embedding-disruption losses, EMA normalisation and the encoder fine-tuning loss.

All losses accept a single sample (N, d) or a batch (B, N, d) and return the
batch mean as a scalar Node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from edpa import autodiff as ad
from edpa.encoders import encode_visual
from edpa.errors import ConfigError, DomainError, ShapeError


def _shape(x):
    return x.shape if isinstance(x, ad.Node) else np.shape(x)


def patch_contrastive_loss(P, P_adv, tau: float = 0.1) -> ad.Node:
    """InfoNCE over patch positions: clean patch i should match perturbed patch i.

    loss = -mean_i log softmax_j(cos(p_i, p'_j) / tau)[i]
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if _shape(P) != _shape(P_adv):
        raise ShapeError(f"patch_contrastive_loss: shapes differ {_shape(P)} vs {_shape(P_adv)}")
    n = _shape(P)[-2]
    if n == 0:
        raise ShapeError("patch_contrastive_loss: no patches (N = 0)")
    logits = ad.scale(ad.pairwise_cosine(P, P_adv), 1.0 / tau)
    diag = ad.reduce_sum(ad.mul(logits, np.eye(n)), axis=-1)
    return ad.mean(ad.sub(ad.logsumexp(logits, axis=-1), diag))


def alignment_shift_loss(P, P_adv, W) -> ad.Node:
    """Mean absolute change of patch/token cosines caused by the perturbation."""
    if _shape(W)[-2] == 0:
        raise ShapeError("alignment_shift_loss: empty token embeddings")
    if _shape(P) != _shape(P_adv) or _shape(P)[-1] != _shape(W)[-1]:
        raise ShapeError(f"alignment_shift_loss: shapes {_shape(P)}, {_shape(P_adv)}, {_shape(W)} disagree")
    if _shape(P)[-2] == 0:
        raise ShapeError("alignment_shift_loss: no patches (N = 0)")
    shift = ad.sub(ad.pairwise_cosine(P, W), ad.pairwise_cosine(P_adv, W))
    return ad.mean(ad.absolute(shift))


@dataclass
class EmaState:
    beta: float = 0.99
    eps: float = 1e-8
    averages: dict[str, float] = field(default_factory=dict)

    def snapshot(self) -> "EmaState":
        return EmaState(self.beta, self.eps, dict(self.averages))


def ema_scale(state: EmaState, loss_id: str, value: float, update: bool = True) -> float:
    """Detached multiplier that normalises ``value`` by the running mean magnitude."""
    if not math.isfinite(value):
        raise DomainError(f"ema_normalize: non-finite value {value!r} for loss {loss_id!r}")
    mag = abs(value)
    if loss_id not in state.averages:
        if update:
            state.averages[loss_id] = mag
        return 1.0 / mag if mag > 0 else 0.0
    avg = state.averages[loss_id]
    if update:
        state.averages[loss_id] = state.beta * avg + (1.0 - state.beta) * mag
    return 1.0 / (avg + state.eps)


def ema_normalize(state: EmaState, loss_id: str, value, update: bool = True):
    """Normalised loss. Accepts a float or a Node; the scale carries no gradient."""
    raw = value.item() if isinstance(value, ad.Node) else float(value)
    s = ema_scale(state, loss_id, raw, update)
    return ad.scale(value, s) if isinstance(value, ad.Node) else raw * s


@dataclass
class ObjectiveConfig:
    alpha1: float = 0.8
    tau: float = 0.1
    ema_beta: float = 0.99
    ema_eps: float = 1e-8
    normalize: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha1 <= 1.0:
            raise ConfigError(f"alpha1 must lie in [0, 1], got {self.alpha1}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")

    def new_ema(self) -> EmaState:
        return EmaState(self.ema_beta, self.ema_eps)


@dataclass
class ObjectiveTerms:
    objective: ad.Node
    patch: ad.Node
    align: ad.Node


def edpa_objective_terms(P, P_adv, W, cfg: ObjectiveConfig, state: EmaState | None, update: bool = True) -> ObjectiveTerms:
    l_patch = patch_contrastive_loss(P, P_adv, cfg.tau)
    l_align = alignment_shift_loss(P, P_adv, W)
    if cfg.normalize and state is not None:
        n_patch = ema_normalize(state, "patch", l_patch, update)
        n_align = ema_normalize(state, "align", l_align, update)
    else:
        n_patch, n_align = l_patch, l_align
    J = ad.add(ad.scale(n_patch, cfg.alpha1), ad.scale(n_align, 1.0 - cfg.alpha1))
    return ObjectiveTerms(J, l_patch, l_align)


def edpa_objective(P, P_adv, W, cfg: ObjectiveConfig, state: EmaState | None, update: bool = True) -> ad.Node:
    """alpha1 * norm(L_patch) + (1 - alpha1) * norm(L_align); to be maximised."""
    return edpa_objective_terms(P, P_adv, W, cfg, state, update).objective


@dataclass
class FinetuneTerms:
    loss: ad.Node
    clean: ad.Node
    adversarial: ad.Node


def squared_deviation(A, B) -> ad.Node:
    """Squared Frobenius norm of A - B over the last two axes, averaged over the batch."""
    if _shape(A) != _shape(B):
        raise ShapeError(f"embedding shapes differ: {_shape(A)} vs {_shape(B)}")
    diff = ad.sub(A, B)
    sq = ad.reduce_sum(ad.mul(diff, diff), axis=(-2, -1))
    return ad.mean(sq)


def finetune_terms(visual, visual_orig, images, images_adv, alpha2: float, orig_clean=None) -> FinetuneTerms:
    """alpha2 * ||E(v) - E_orig(v)||^2 + (1 - alpha2) * ||E(v (+) delta) - E_orig(v)||^2.

    ``visual_orig`` is treated as frozen; pass ``orig_clean`` to reuse a cached
    E_orig(v).
    """
    if not 0.0 <= alpha2 <= 1.0:
        raise ConfigError(f"alpha2 must lie in [0, 1], got {alpha2}")
    if _shape(images) != _shape(images_adv):
        raise ShapeError(f"clean {_shape(images)} and adversarial {_shape(images_adv)} inputs differ")
    target = orig_clean if orig_clean is not None else encode_visual(visual_orig, images)
    target = target.value if isinstance(target, ad.Node) else np.asarray(target)
    clean = squared_deviation(encode_visual(visual, images), target)
    adv = squared_deviation(encode_visual(visual, images_adv), target)
    loss = ad.add(ad.scale(clean, alpha2), ad.scale(adv, 1.0 - alpha2))
    return FinetuneTerms(loss, clean, adv)


def finetune_loss(visual, visual_orig, images, images_adv, alpha2: float) -> ad.Node:
    return finetune_terms(visual, visual_orig, images, images_adv, alpha2).loss
