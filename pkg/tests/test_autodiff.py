import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edpa import autodiff as ad
from edpa.errors import DomainError, ShapeError


def max_rel_err(g, ref, floor=1e-8):
    g, ref = np.asarray(g), np.asarray(ref)
    small = np.abs(ref) < floor
    rel = np.abs(g - ref) / np.maximum(np.abs(ref), floor)
    return float(np.max(np.where(small, np.abs(g - ref), rel)))


def check_grad(build, x, h=1e-4, tol=1e-5):
    """Compare backward with central differences for scalar ``build(node)``."""
    leaf = ad.leaf(x)
    (g,) = ad.grad_of(build(leaf), leaf)
    fd = ad.finite_difference_gradient(lambda v: build(ad.constant(v)).item(), x, h)
    assert max_rel_err(g, fd) < tol


def test_add_componentwise():
    assert np.array_equal(ad.add([1.0, 2.0], [3.0, 4.0]).value, [4.0, 6.0])


def test_matmul_identity():
    A = np.random.default_rng(0).normal(size=(3, 5))
    assert np.array_equal(ad.matmul(np.eye(3), A).value, A)


def test_l2_norm_345():
    assert ad.l2_norm([3.0, 4.0]).item() == 5.0


@pytest.mark.parametrize(
    "a,b,expected",
    [([1.0, 0.0], [1.0, 0.0], 1.0), ([1.0, 0.0], [0.0, 1.0], 0.0), ([1.0, 0.0], [-1.0, 0.0], -1.0)],
)
def test_cosine_examples(a, b, expected):
    assert ad.cosine_similarity(a, b).item() == expected


def test_cosine_length_mismatch():
    with pytest.raises(ShapeError):
        ad.cosine_similarity([1.0, 2.0], [1.0, 2.0, 3.0])


def test_cosine_zero_vector_is_finite():
    assert ad.cosine_similarity([0.0, 0.0], [1.0, 0.0]).item() == 0.0


def test_backward_sum_of_squares():
    x = ad.leaf([1.0, 2.0])
    grads = ad.backward(ad.reduce_sum(x * x))
    assert np.array_equal(grads[x], [2.0, 4.0])


def test_backward_cos_self_is_zero():
    x = ad.leaf(np.random.default_rng(1).normal(size=6))
    (g,) = ad.grad_of(ad.cosine_similarity(x, x), x)
    assert np.max(np.abs(g)) < 1e-9


def test_backward_rejects_non_scalar():
    x = ad.leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        ad.backward(x * x)


def test_abs_subgradient_zero_at_kink():
    x = ad.leaf([0.0, -2.0, 3.0])
    (g,) = ad.grad_of(ad.reduce_sum(ad.absolute(x)), x)
    assert np.array_equal(g, [0.0, -1.0, 1.0])


def test_shape_errors_name_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(np.ones((2, 3)), np.ones((4, 5)))
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        ad.add(np.ones(2), np.ones(3))


def test_log_rejects_non_positive():
    with pytest.raises(DomainError):
        ad.log([1.0, 0.0])


def test_empty_reduction_rejected():
    with pytest.raises(ShapeError):
        ad.reduce_sum(np.zeros((2, 0)), axis=1)
    with pytest.raises(ShapeError):
        ad.mean(np.zeros((0,)))


def test_finite_difference_examples():
    x = np.random.default_rng(2).normal(size=(3, 4))
    assert np.allclose(ad.finite_difference_gradient(lambda v: v.sum(), x, 1e-4), 1.0, atol=1e-9)
    g = ad.finite_difference_gradient(lambda v: float(v[0] ** 2), np.array([3.0]), 1e-4)
    assert abs(g[0] - 6.0) < 1e-6


def test_finite_difference_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.finite_difference_gradient(lambda v: v.sum(), np.ones(2), 0.0)


def test_graph_nodes_are_not_mutated():
    x = ad.leaf([1.0, 2.0])
    y = ad.tanh(x)
    before = y.value.copy()
    ad.backward(ad.reduce_sum(y * y))
    ad.backward(ad.reduce_sum(y * y))
    assert np.array_equal(y.value, before)


def test_constants_carry_no_graph():
    y = ad.tanh(ad.constant([1.0]))
    assert not y.requires_grad and y.inputs == ()


def test_backward_deterministic():
    rng = np.random.default_rng(3)
    A, B = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))

    def run():
        a = ad.leaf(A)
        loss = ad.mean(ad.pairwise_cosine(a, B) * 3.0)
        return ad.grad_of(loss, a)[0]

    assert np.array_equal(run(), run())


def test_accumulation_order_independent():
    rng = np.random.default_rng(4)
    xs = [rng.normal(size=5) for _ in range(16)]
    w = rng.normal(size=5)

    def per_sample(x):
        leaf = ad.leaf(w)
        return ad.grad_of(ad.tanh(ad.reduce_sum(leaf * x)), leaf)[0]

    grads = [per_sample(x) for x in xs]
    forward = sum(grads)
    backward = sum(reversed(grads))
    assert np.max(np.abs(forward - backward)) < 1e-9


UNARY = {
    "exp": lambda n: ad.reduce_sum(ad.exp(n)),
    "log": lambda n: ad.reduce_sum(ad.log(ad.add(ad.mul(n, n), 0.5))),
    "abs": lambda n: ad.reduce_sum(ad.mul(ad.absolute(n), n)),
    "tanh": lambda n: ad.reduce_sum(ad.tanh(n)),
    "scale": lambda n: ad.reduce_sum(ad.mul(ad.scale(n, -2.5), n)),
    "neg": lambda n: ad.reduce_sum(ad.mul(ad.neg(n), n)),
    "l2_norm": lambda n: ad.reduce_sum(ad.l2_norm(n)),
    "sum_rows": lambda n: ad.reduce_sum(ad.tanh(ad.reduce_sum(n, axis=1))),
    "mean_rows": lambda n: ad.reduce_sum(ad.tanh(ad.mean(n, axis=1))),
    "reshape": lambda n: ad.reduce_sum(ad.tanh(ad.reshape(n, (-1,))) * np.arange(12.0)),
    "transpose": lambda n: ad.reduce_sum(ad.transpose(n) * np.arange(12.0).reshape(4, 3)),
    "index": lambda n: ad.reduce_sum(ad.tanh(n[1:, ::2])),
    "paste": lambda n: ad.reduce_sum(ad.tanh(ad.paste(n, (5, 7), (1, 2))) * np.arange(35.0).reshape(5, 7)),
    "take": lambda n: ad.reduce_sum(ad.tanh(ad.take(n, [0, 2, 2, 1]))),
    "clip": lambda n: ad.reduce_sum(ad.clip(n, -0.7, 0.7) * n),
    "clamp_min": lambda n: ad.reduce_sum(ad.clamp_min(n, 0.1) * n),
    "logsumexp": lambda n: ad.reduce_sum(ad.logsumexp(n, axis=-1)),
    "pairwise_cosine": lambda n: ad.reduce_sum(ad.pairwise_cosine(n, n[::-1]) * np.arange(9.0).reshape(3, 3)),
}

BINARY = {
    "add": lambda a, b: ad.reduce_sum(ad.tanh(ad.add(a, b))),
    "sub": lambda a, b: ad.reduce_sum(ad.tanh(ad.sub(a, b))),
    "mul": lambda a, b: ad.reduce_sum(ad.mul(a, b)),
    "div": lambda a, b: ad.reduce_sum(ad.div(a, ad.add(ad.mul(b, b), 1.0))),
    "matmul": lambda a, b: ad.reduce_sum(ad.tanh(ad.scale(ad.matmul(a, ad.transpose(b)), 0.3))),
    "stack": lambda a, b: ad.reduce_sum(ad.tanh(ad.stack([a, b])) * np.arange(24.0).reshape(2, 3, 4)),
    "concat": lambda a, b: ad.reduce_sum(ad.tanh(ad.concat([a, b], axis=0)) * np.arange(24.0).reshape(6, 4)),
    "broadcast_bias": lambda a, b: ad.reduce_sum(ad.tanh(ad.add(a, b[0]))),
    "rowwise_cosine": lambda a, b: ad.reduce_sum(ad.rowwise_cosine(a, b)),
}


# cosine is scale-invariant; longer vectors keep the central-difference truncation error small
INPUT_SCALE = {"pairwise_cosine": 4.0, "rowwise_cosine": 4.0, "l2_norm": 4.0}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    build = UNARY[name]
    for _ in range(100):
        x = rng.normal(scale=INPUT_SCALE.get(name, 1.0), size=(3, 4))
        # keep non-smooth ops away from their kinks so central differences are valid
        if name in ("abs", "clip", "clamp_min"):
            x = np.where(np.abs(x) < 1e-2, 0.3, x)
            x = np.where(np.abs(np.abs(x) - 0.7) < 1e-2, 0.3, x)
            x = np.where(np.abs(x - 0.1) < 1e-2, 0.3, x)
        check_grad(build, x)


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    build = BINARY[name]
    for _ in range(100):
        s = INPUT_SCALE.get(name, 1.0)
        a, b = rng.normal(scale=s, size=(3, 4)), rng.normal(scale=s, size=(3, 4))
        check_grad(lambda n: build(n, ad.constant(b)), a)
        check_grad(lambda n: build(ad.constant(a), n), b)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_cosine_in_range(a, b):
    n = min(len(a), len(b))
    c = ad.cosine_similarity(a[:n], b[:n]).item()
    assert -1.0 <= c <= 1.0


def test_batched_matmul_gradients():
    rng = np.random.default_rng(7)
    W = rng.normal(size=(4, 3))
    check_grad(lambda n: ad.reduce_sum(ad.tanh(ad.matmul(n, W))), rng.normal(size=(2, 5, 4)))
    X = rng.normal(size=(2, 5, 4))
    check_grad(lambda n: ad.reduce_sum(ad.tanh(ad.matmul(X, n))), W)
