"""Tape-style reverse-mode differentiation over float64 numpy arrays.

Every op returns a fresh :class:`Node`; the graph is rebuilt on each forward
pass and node values are never mutated. Nodes whose inputs do not require
gradients are created as constants, so frozen computations cost nothing on
the backward pass.
"""

from __future__ import annotations

import enum
from typing import Callable, Iterable, Sequence

import numpy as np

from edpa.errors import DomainError, ShapeError

NORM_EPS = 1e-12


class OpKind(enum.Enum):
    LEAF = "leaf"
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    SCALE = "scale"
    NEG = "neg"
    EXP = "exp"
    LOG = "log"
    ABS = "abs"
    TANH = "tanh"
    MATMUL = "matmul"
    SUM = "sum"
    MEAN = "mean"
    L2_NORM = "l2_norm"
    CLAMP_MIN = "clamp_min"
    CLIP = "clip"
    RESHAPE = "reshape"
    TRANSPOSE = "transpose"
    INDEX = "index"
    PASTE = "paste"
    STACK = "stack"
    CONCAT = "concat"
    TAKE = "take"


class Node:
    """A value in the graph plus what backward needs to propagate through it."""

    __slots__ = ("value", "kind", "inputs", "requires_grad", "grad", "_backward", "name")

    def __init__(
        self,
        value,
        kind: OpKind = OpKind.LEAF,
        inputs: tuple["Node", ...] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.kind = kind
        self.inputs = inputs
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.kind.value}{label}, shape={self.shape})"

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)


def leaf(value, requires_grad: bool = True, name: str | None = None) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=requires_grad, name=name)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, kind, inputs, backward_fn) -> Node:
    if any(inp.requires_grad for inp in inputs):
        return Node(value, kind, inputs, backward_fn, requires_grad=True)
    return Node(value, kind)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: OpKind, a: Node, b: Node) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind.value}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------------


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(OpKind.ADD, a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, OpKind.ADD, (a, b), backward)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(OpKind.SUB, a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, OpKind.SUB, (a, b), backward)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(OpKind.MUL, a, b)

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, OpKind.MUL, (a, b), backward)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(OpKind.DIV, a, b)
    if np.any(b.value == 0):
        raise DomainError("div: zero in denominator")
    out = a.value / b.value

    def backward(g):
        return _unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)

    return _make(out, OpKind.DIV, (a, b), backward)


def scale(a, c: float) -> Node:
    a = as_node(a)
    return _make(a.value * c, OpKind.SCALE, (a,), lambda g: (g * c,))


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, OpKind.NEG, (a,), lambda g: (-g,))


# -- elementwise unary -------------------------------------------------------


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, OpKind.EXP, (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0):
        bad = float(a.value[a.value <= 0].reshape(-1)[0])
        raise DomainError(f"log: non-positive input (e.g. {bad!r})")
    return _make(np.log(a.value), OpKind.LOG, (a,), lambda g: (g / a.value,))


def absolute(a) -> Node:
    a = as_node(a)
    # np.sign(0) == 0 gives the zero subgradient at the kink
    return _make(np.abs(a.value), OpKind.ABS, (a,), lambda g: (g * np.sign(a.value),))


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, OpKind.TANH, (a,), lambda g: (g * (1.0 - out * out),))


def clamp_min(a, lo: float) -> Node:
    a = as_node(a)
    keep = a.value > lo
    return _make(np.where(keep, a.value, lo), OpKind.CLAMP_MIN, (a,), lambda g: (g * keep,))


def clip(a, lo: float, hi: float) -> Node:
    a = as_node(a)
    keep = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), OpKind.CLIP, (a,), lambda g: (g * keep,))


# -- linear algebra and reductions --------------------------------------------


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, OpKind.MATMUL, (a, b), backward)


def _check_axis(kind: OpKind, a: Node, axis):
    if axis is None:
        if a.value.size == 0:
            raise ShapeError(f"{kind.value}: reduction over empty tensor {a.shape}")
        return
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ShapeError(f"{kind.value}: axis {ax} out of range for shape {a.shape}")
        if a.shape[ax] == 0:
            raise ShapeError(f"{kind.value}: reduction over empty axis {ax} of {a.shape}")


def _expand_grad(g, a: Node, axis, keepdims: bool):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    _check_axis(OpKind.SUM, a, axis)
    out = a.value.sum(axis=axis, keepdims=keepdims)
    return _make(out, OpKind.SUM, (a,), lambda g: (_expand_grad(g, a, axis, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    _check_axis(OpKind.MEAN, a, axis)
    out = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size // max(out.size, 1)
    return _make(out, OpKind.MEAN, (a,), lambda g: (_expand_grad(g, a, axis, keepdims) / count,))


def l2_norm(a, keepdims: bool = False) -> Node:
    """Euclidean norm along the last axis; gradient 0 at the zero vector."""
    a = as_node(a)
    _check_axis(OpKind.L2_NORM, a, -1)
    norm = np.sqrt(np.sum(a.value * a.value, axis=-1, keepdims=True))

    def backward(g):
        g = g if keepdims else g[..., None]
        safe = np.where(norm > 0, norm, 1.0)
        return (g * np.where(norm > 0, a.value / safe, 0.0),)

    out = norm if keepdims else norm[..., 0]
    return _make(out, OpKind.L2_NORM, (a,), backward)


# -- structural ----------------------------------------------------------------


def reshape(a, shape) -> Node:
    a = as_node(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, OpKind.RESHAPE, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Node:
    a = as_node(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.value, axes), OpKind.TRANSPOSE, (a,), lambda g: (np.transpose(g, inverse),))


def swap_last(a) -> Node:
    a = as_node(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def index_select(a, index) -> Node:
    a = as_node(a)
    out = a.value[index]

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, OpKind.INDEX, (a,), backward)


def paste(a, shape: tuple[int, ...], offset: tuple[int, ...]) -> Node:
    """Place ``a`` into a zero tensor of ``shape`` starting at ``offset``."""
    a = as_node(a)
    if len(shape) != a.ndim or len(offset) != a.ndim:
        raise ShapeError(f"paste: rank mismatch {a.shape} into {tuple(shape)} at {tuple(offset)}")
    region = tuple(slice(o, o + s) for o, s in zip(offset, a.shape))
    if any(o < 0 or o + s > n for o, s, n in zip(offset, a.shape, shape)):
        raise ShapeError(f"paste: {a.shape} at {tuple(offset)} exceeds {tuple(shape)}")
    out = np.zeros(shape)
    out[region] = a.value
    return _make(out, OpKind.PASTE, (a,), lambda g: (g[region],))


def stack(nodes: Iterable, axis: int = 0) -> Node:
    nodes = tuple(as_node(n) for n in nodes)
    shapes = {n.shape for n in nodes}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(nodes)))

    return _make(np.stack([n.value for n in nodes], axis=axis), OpKind.STACK, nodes, backward)


def concat(nodes: Iterable, axis: int = -1) -> Node:
    nodes = tuple(as_node(n) for n in nodes)
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: mismatched shapes {[n.shape for n in nodes]}") from None
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, OpKind.CONCAT, nodes, backward)


def take(table, ids) -> Node:
    """Row lookup ``table[ids]`` (embedding gather)."""
    table = as_node(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = int(ids[(ids < 0) | (ids >= table.shape[0])].reshape(-1)[0])
        raise ShapeError(f"take: id {bad} out of range for table with {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.value[ids], OpKind.TAKE, (table,), backward)


# -- composites ------------------------------------------------------------------


def logsumexp(a, axis: int = -1) -> Node:
    """Max-shifted log-sum-exp; the shift is a constant so gradients are exact."""
    a = as_node(a)
    shift = constant(np.max(a.value, axis=axis, keepdims=True))
    summed = reduce_sum(exp(sub(a, shift)), axis=axis, keepdims=True)
    return reshape(add(log(summed), shift), np.squeeze(summed.value, axis=axis).shape)


def normalize_rows(a, eps: float = NORM_EPS) -> Node:
    a = as_node(a)
    return div(a, clamp_min(l2_norm(a, keepdims=True), eps))


def cosine_similarity(a, b, eps: float = NORM_EPS) -> Node:
    """Cosine of two vectors, denominators floored at ``eps``, clipped to [-1, 1]."""
    a, b = as_node(a), as_node(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: need equal-length vectors, got {a.shape} and {b.shape}")
    dot = reduce_sum(mul(a, b))
    denom = mul(clamp_min(l2_norm(a), eps), clamp_min(l2_norm(b), eps))
    return clip(div(dot, denom), -1.0, 1.0)


def pairwise_cosine(a, b, eps: float = NORM_EPS) -> Node:
    """Cosine matrix between the rows of ``a`` (..., N, d) and ``b`` (..., M, d)."""
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"pairwise_cosine: incompatible shapes {a.shape} and {b.shape}")
    return clip(matmul(normalize_rows(a, eps), swap_last(normalize_rows(b, eps))), -1.0, 1.0)


def rowwise_cosine(a, b, eps: float = NORM_EPS) -> Node:
    """Cosine between matching rows of ``a`` and ``b`` (..., N, d) -> (..., N)."""
    a, b = as_node(a), as_node(b)
    if a.shape != b.shape:
        raise ShapeError(f"rowwise_cosine: shapes differ {a.shape} vs {b.shape}")
    dot = reduce_sum(mul(a, b), axis=-1)
    denom = mul(clamp_min(l2_norm(a), eps), clamp_min(l2_norm(b), eps))
    return clip(div(dot, denom), -1.0, 1.0)


# -- backward ----------------------------------------------------------------------


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack_: list[tuple[Node, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Propagate d(root)/d(node) to every leaf that requires a gradient.

    Returns a map from leaf node to its gradient and also stores it in
    ``leaf.grad``. Leaves reachable only through constants get no entry.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    result: dict[Node, np.ndarray] = {}
    if not root.requires_grad:
        return result
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.array(g, dtype=np.float64)
            node.grad = g
            result[node] = g
            continue
        for parent, pg in zip(node.inputs, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)
    return result


def grad_of(root: Node, *leaves: Node) -> list[np.ndarray]:
    """Gradients of ``root`` w.r.t. ``leaves``; zeros for leaves the root ignores."""
    found = backward(root)
    return [found.get(lf, np.zeros_like(lf.value)) for lf in leaves]


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = float(f(x))
        flat[k] = orig - h
        down = float(f(x))
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * h)
    return grad
