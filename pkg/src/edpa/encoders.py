"""Toy visual encoder, language encoder and action head, plus pretraining.

The visual encoder splits the image into non-overlapping square blocks and
runs the same two-layer tanh MLP on each block, then adds a learned
positional embedding per block. The language encoder is a table lookup plus
positional offsets. The action head mean-pools both token sequences,
concatenates them and applies an affine readout.

Any array field of the param dataclasses may be an autodiff ``Node``; the
forward functions accept either.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from edpa import autodiff as ad
from edpa.errors import ConfigError, DivergenceError, ShapeError
from edpa.optim import AdamState, adam_step
from edpa.tensorio import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Geometry:
    height: int = 64
    width: int = 64
    channels: int = 3
    patch_size: int = 32
    dim: int = 32
    max_tokens: int = 8
    vocab: int = 64
    action_dim: int = 3

    def __post_init__(self):
        ps = self.patch_size
        if ps <= 0 or self.height % ps or self.width % ps:
            raise ShapeError(f"patch size {ps} must divide H={self.height} and W={self.width}")
        if self.dim <= 0 or self.action_dim < 1:
            raise ShapeError(f"need dim > 0 and action_dim >= 1, got {self.dim}, {self.action_dim}")

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def patch_input(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class VisualEncoderParams:
    proj: np.ndarray
    hidden: np.ndarray
    bias1: np.ndarray
    bias2: np.ndarray
    pos: np.ndarray
    patch_size: int = field(default=32, compare=False)


@dataclass
class LanguageEncoderParams:
    table: np.ndarray
    pos: np.ndarray


@dataclass
class ActionHeadParams:
    weight: np.ndarray
    bias: np.ndarray


def param_arrays(params) -> dict[str, np.ndarray]:
    return {f.name: getattr(params, f.name) for f in fields(params) if f.name != "patch_size"}


def with_arrays(params, arrays: dict):
    return replace(params, **arrays)


def as_leaves(params):
    """Copy of ``params`` with every array wrapped in a grad-requiring leaf."""
    return with_arrays(params, {k: ad.leaf(v, name=k) for k, v in param_arrays(params).items()})


def values_of(params):
    return with_arrays(params, {k: (v.value if isinstance(v, ad.Node) else v) for k, v in param_arrays(params).items()})


@dataclass
class Encoders:
    visual: VisualEncoderParams
    language: LanguageEncoderParams
    head: ActionHeadParams
    geometry: Geometry = field(default_factory=Geometry)
    meta: dict = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, part in (("visual", self.visual), ("language", self.language), ("head", self.head)):
            for k, v in param_arrays(part).items():
                out[f"{prefix}.{k}"] = np.asarray(v, dtype=np.float64)
        return out

    def save(self, path) -> None:
        save_checkpoint(path, self.tensors(), {"geometry": asdict(self.geometry), **self.meta})

    @classmethod
    def load(cls, path) -> "Encoders":
        tensors, meta = load_checkpoint(path)
        meta = dict(meta)
        geom = Geometry(**meta.pop("geometry"))

        def pick(prefix):
            n = len(prefix) + 1
            return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}

        try:
            visual = VisualEncoderParams(**pick("visual"), patch_size=geom.patch_size)
            language = LanguageEncoderParams(**pick("language"))
            head = ActionHeadParams(**pick("head"))
        except TypeError as exc:
            raise ShapeError(f"{path}: checkpoint tensors do not match encoder layout: {exc}") from None
        return cls(visual, language, head, geom, meta)

    def with_visual(self, visual: VisualEncoderParams) -> "Encoders":
        return replace(self, visual=visual, meta=dict(self.meta))


def init_encoders(geometry: Geometry, rng: np.random.Generator) -> Encoders:
    g = geometry
    d, k = g.dim, g.patch_input
    visual = VisualEncoderParams(
        proj=rng.normal(0.0, 1.0 / np.sqrt(k), (k, d)),
        hidden=rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
        bias1=np.zeros(d),
        bias2=np.zeros(d),
        pos=rng.normal(0.0, 0.1, (g.n_patches, d)),
        patch_size=g.patch_size,
    )
    language = LanguageEncoderParams(
        table=rng.normal(0.0, 0.5, (g.vocab, d)),
        pos=rng.normal(0.0, 0.1, (g.max_tokens, d)),
    )
    head = ActionHeadParams(
        weight=rng.normal(0.0, 1.0 / np.sqrt(2 * d), (2 * d, g.action_dim)),
        bias=np.zeros(g.action_dim),
    )
    return Encoders(visual, language, head, geometry)


# -- forward ----------------------------------------------------------------


def _value(x):
    return x.value if isinstance(x, ad.Node) else np.asarray(x)


def patchify(image, ps: int):
    """Split (..., H, W, C) into (..., N, ps*ps*C) blocks in row-major block order.

    Each block is flattened row by row, channels innermost. Accepts a numpy
    array (returns an array) or a Node (returns a Node).
    """
    shape = _value(image).shape
    if len(shape) < 3:
        raise ShapeError(f"patchify: expected (..., H, W, C), got {shape}")
    *lead, h, w, c = shape
    if ps <= 0 or h % ps or w % ps:
        raise ShapeError(f"patchify: patch size {ps} does not divide H={h}, W={w}")
    nl = len(lead)
    split = (*lead, h // ps, ps, w // ps, ps, c)
    order = (*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    flat = (*lead, (h // ps) * (w // ps), ps * ps * c)
    if isinstance(image, ad.Node):
        return ad.reshape(ad.transpose(ad.reshape(image, split), order), flat)
    return np.asarray(image).reshape(split).transpose(order).reshape(flat)


PIXEL_CENTER = 0.5


def encode_visual(params: VisualEncoderParams, image):
    """Patch embeddings (..., N, d) for an image (..., H, W, C).

    Pixels are shifted by -0.5 before the projection; without it Adam drives
    the first layer into saturation on the all-positive inputs.
    """
    blocks = patchify(image, params.patch_size)
    k = _value(params.proj).shape[0]
    n = _value(params.pos).shape[0]
    if _value(blocks).shape[-1] != k or _value(blocks).shape[-2] != n:
        raise ShapeError(
            f"encode_visual: image gives blocks {_value(blocks).shape[-2:]}, params expect ({n}, {k})"
        )
    if not any(isinstance(x, ad.Node) for x in (image, *param_arrays(params).values())):
        hid = np.tanh((blocks - PIXEL_CENTER) @ params.proj + params.bias1)
        return np.tanh(hid @ params.hidden + params.bias2) + params.pos
    hid = ad.tanh(ad.add(ad.matmul(ad.sub(blocks, PIXEL_CENTER), params.proj), params.bias1))
    return ad.add(ad.tanh(ad.add(ad.matmul(hid, params.hidden), params.bias2)), params.pos)


def encode_language(params: LanguageEncoderParams, tokens):
    """Token embeddings (M, d): table row plus positional offset per token."""
    tokens = np.asarray(tokens, dtype=np.int64)
    vocab, max_tokens = _value(params.table).shape[0], _value(params.pos).shape[0]
    if tokens.ndim != 1 or tokens.size == 0:
        raise ShapeError(f"encode_language: need a non-empty 1-D id sequence, got shape {tokens.shape}")
    bad = tokens[(tokens < 0) | (tokens >= vocab)]
    if bad.size:
        raise ShapeError(f"encode_language: token id {int(bad[0])} out of range [0, {vocab})")
    m = tokens.size
    if m > max_tokens:
        raise ShapeError(f"encode_language: {m} tokens exceed max {max_tokens}")
    if isinstance(params.table, ad.Node) or isinstance(params.pos, ad.Node):
        return ad.add(ad.take(params.table, tokens), ad.index_select(ad.as_node(params.pos), slice(0, m)))
    return params.table[tokens] + params.pos[:m]


def encode_language_batch(params: LanguageEncoderParams, token_lists: Sequence[Sequence[int]]):
    """(B, M, d) for equal-length instructions."""
    lengths = {len(t) for t in token_lists}
    if len(lengths) != 1:
        raise ShapeError(f"encode_language_batch: instructions have differing lengths {sorted(lengths)}")
    rows = [encode_language(params, t) for t in token_lists]
    if any(isinstance(r, ad.Node) for r in rows):
        return ad.stack(rows, axis=0)
    return np.stack(rows)


def action_head(params: ActionHeadParams, patches, tokens):
    """Affine readout of [mean-pooled patches, mean-pooled tokens] -> (..., A)."""
    dp, dt = _value(patches).shape[-1], _value(tokens).shape[-1]
    if dp != dt or 2 * dp != _value(params.weight).shape[0]:
        raise ShapeError(
            f"action_head: patch dim {dp}, token dim {dt}, readout expects {_value(params.weight).shape[0]} inputs"
        )
    if not any(isinstance(x, ad.Node) for x in (patches, tokens, params.weight, params.bias)):
        pooled = np.concatenate([np.mean(patches, axis=-2), np.mean(tokens, axis=-2)], axis=-1)
        return pooled @ params.weight + params.bias
    pooled = ad.concat([ad.mean(patches, axis=-2), ad.mean(tokens, axis=-2)], axis=-1)
    if pooled.ndim == 1:
        out = ad.matmul(ad.reshape(pooled, (1, -1)), params.weight)
        return ad.add(ad.reshape(out, (out.shape[-1],)), params.bias)
    return ad.add(ad.matmul(pooled, params.weight), params.bias)


def predict(enc: Encoders, images: np.ndarray, token_lists) -> np.ndarray:
    """Actions (B, A) for a batch of images and instructions; plain numpy."""
    P = encode_visual(enc.visual, images)
    W = encode_language_batch(enc.language, token_lists)
    return action_head(enc.head, P, W)


# -- pretraining ------------------------------------------------------------------


@dataclass
class PretrainConfig:
    iterations: int = 4000
    lr: float = 3e-3
    batch_size: int = 32
    lambda_align: float = 0.5
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError(f"invalid pretrain config: {self}")


def _pretrain_loss(enc_nodes: Encoders, images, tokens, actions, lambda_align: float):
    P = encode_visual(enc_nodes.visual, images)
    W = encode_language_batch(enc_nodes.language, tokens)
    pred = action_head(enc_nodes.head, P, W)
    mse = ad.mean(ad.mul(ad.sub(pred, actions), ad.sub(pred, actions)))
    if lambda_align == 0:
        return mse, mse, None
    align = ad.mean(ad.rowwise_cosine(ad.mean(P, axis=-2), ad.mean(W, axis=-2)))
    total = ad.add(mse, ad.scale(ad.sub(1.0, align), lambda_align))
    return total, mse, align


def action_mse(enc: Encoders, samples) -> float:
    images = np.stack([s.image for s in samples])
    pred = predict(enc, images, [s.tokens for s in samples])
    actions = np.stack([s.action for s in samples])
    return float(np.mean((pred - actions) ** 2))


def pretrain(samples, cfg: PretrainConfig, geometry: Geometry | None = None):
    """Jointly fit all three components by Adam on action MSE plus an alignment term.

    Returns ``(encoders, curve)`` where ``curve`` is a list of dicts with the
    iteration, total loss, action MSE and mean pooled cosine.
    """
    samples = list(samples)
    if not samples:
        raise ConfigError("pretrain: empty dataset")
    geometry = geometry or Geometry()
    rng = np.random.default_rng(cfg.seed)
    enc = init_encoders(geometry, rng)
    images = np.stack([s.image for s in samples])
    actions = np.stack([s.action for s in samples])
    tokens = [list(s.tokens) for s in samples]

    parts = {"visual": enc.visual, "language": enc.language, "head": enc.head}
    flat = {f"{p}.{k}": v for p, obj in parts.items() for k, v in param_arrays(obj).items()}
    state = AdamState()
    curve = []
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(samples), size=cfg.batch_size)
        leaves = {name: ad.leaf(v, name=name) for name, v in flat.items()}
        nodes = Encoders(
            with_arrays(enc.visual, {k[7:]: v for k, v in leaves.items() if k.startswith("visual.")}),
            with_arrays(enc.language, {k[9:]: v for k, v in leaves.items() if k.startswith("language.")}),
            with_arrays(enc.head, {k[5:]: v for k, v in leaves.items() if k.startswith("head.")}),
            geometry,
        )
        total, mse, align = _pretrain_loss(nodes, images[idx], [tokens[i] for i in idx], actions[idx], cfg.lambda_align)
        if not np.isfinite(total.item()):
            raise DivergenceError(f"pretrain diverged at iteration {it}: loss={total.item()}")
        grads = ad.backward(total)
        flat, state = adam_step(flat, {n: grads[lf] for n, lf in leaves.items() if lf in grads}, state, cfg.lr)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            curve.append({
                "iteration": it,
                "loss": total.item(),
                "action_mse": mse.item(),
                "pooled_cosine": align.item() if align is not None else None,
            })
    visual = with_arrays(enc.visual, {k[7:]: v for k, v in flat.items() if k.startswith("visual.")})
    language = with_arrays(enc.language, {k[9:]: v for k, v in flat.items() if k.startswith("language.")})
    head = with_arrays(enc.head, {k[5:]: v for k, v in flat.items() if k.startswith("head.")})
    meta = {"pretrain": asdict(cfg)}
    return Encoders(visual, language, head, geometry, meta), curve
