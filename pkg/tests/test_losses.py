import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edpa import autodiff as ad
from test_autodiff import max_rel_err
from edpa.encoders import Geometry, encode_visual, init_encoders
from edpa.errors import ConfigError, DomainError, ShapeError
from edpa.losses import (
    EmaState,
    ObjectiveConfig,
    alignment_shift_loss,
    edpa_objective,
    edpa_objective_terms,
    ema_normalize,
    finetune_loss,
    finetune_terms,
    patch_contrastive_loss,
)

# log(1 + e^-1), frozen from math.log1p(math.exp(-1))
LOG1P_EXP_M1 = 0.31326168751822286


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def infonce_oracle(P, Q, tau):
    n = len(P)
    total = 0.0
    for i in range(n):
        logits = [cos(P[i], Q[j]) / tau for j in range(n)]
        total -= logits[i] - math.log(sum(math.exp(z) for z in logits))
    return total / n


def align_oracle(P, Q, W):
    return float(np.mean([[abs(cos(p, w) - cos(q, w)) for w in W] for p, q in zip(P, Q)]))


def test_frozen_constant_matches_math():
    assert LOG1P_EXP_M1 == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-15)


def test_single_patch_is_zero():
    P = np.random.default_rng(0).normal(size=(1, 5))
    assert patch_contrastive_loss(P, -P, 0.1).item() == 0.0


def test_orthonormal_closed_forms():
    P = np.eye(2, 4)
    assert abs(patch_contrastive_loss(P, P, 1.0).item() - LOG1P_EXP_M1) < 1e-9
    assert abs(patch_contrastive_loss(P, -P, 1.0).item() - (1.0 + LOG1P_EXP_M1)) < 1e-9


def test_infonce_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n, d = rng.integers(1, 7), rng.integers(2, 6)
        P, Q = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        tau = float(rng.uniform(0.05, 2.0))
        assert abs(patch_contrastive_loss(P, Q, tau).item() - infonce_oracle(P, Q, tau)) < 1e-9


def test_align_matches_loop_oracle_and_examples():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n, m, d = rng.integers(1, 6), rng.integers(1, 6), rng.integers(2, 6)
        P, Q, W = rng.normal(size=(n, d)), rng.normal(size=(n, d)), rng.normal(size=(m, d))
        assert abs(alignment_shift_loss(P, Q, W).item() - align_oracle(P, Q, W)) < 1e-12
    assert alignment_shift_loss([[1.0, 0.0]], [[0.0, 1.0]], [[1.0, 0.0]]).item() == 1.0
    p = np.array([[3.0, 4.0]])
    assert alignment_shift_loss(p, -p, p / 5.0).item() == 2.0


def test_align_identical_is_exactly_zero():
    rng = np.random.default_rng(3)
    for _ in range(100):
        P, W = rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
        assert alignment_shift_loss(P, P, W).item() == 0.0


def test_bounds_on_random_instances():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        n, m, d = int(rng.integers(1, 9)), int(rng.integers(1, 6)), int(rng.integers(2, 8))
        P, Q, W = (rng.normal(size=(k, d)) * rng.uniform(0.1, 10) for k in (n, n, m))
        tau = float(rng.uniform(0.05, 1.0))
        lp = patch_contrastive_loss(P, Q, tau).item()
        la = alignment_shift_loss(P, Q, W).item()
        assert 0.0 <= lp <= 2.0 / tau + math.log(n)
        assert 0.0 <= la <= 2.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_row_rescaling_invariance(seed, c):
    rng = np.random.default_rng(seed)
    P, Q, W = rng.normal(size=(4, 5)), rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
    row = rng.integers(0, 4)
    P2, Q2 = P.copy(), Q.copy()
    P2[row] *= c
    Q2 *= c
    assert abs(patch_contrastive_loss(P2, Q2, 0.1).item() - patch_contrastive_loss(P, Q, 0.1).item()) < 1e-9
    assert abs(alignment_shift_loss(P2, Q2, W * c).item() - alignment_shift_loss(P, Q, W).item()) < 1e-9


def test_rejections():
    with pytest.raises(ShapeError):
        patch_contrastive_loss(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ShapeError):
        patch_contrastive_loss(np.ones((2, 3)), np.ones((3, 3)))
    with pytest.raises(ConfigError):
        patch_contrastive_loss(np.ones((2, 3)), np.ones((2, 3)), tau=0.0)
    with pytest.raises(ShapeError):
        alignment_shift_loss(np.ones((2, 3)), np.ones((2, 3)), np.zeros((0, 3)))


def test_batched_losses_are_batch_means():
    rng = np.random.default_rng(5)
    P, Q, W = rng.normal(size=(3, 4, 6)), rng.normal(size=(3, 4, 6)), rng.normal(size=(3, 2, 6))
    per = [patch_contrastive_loss(P[b], Q[b], 0.2).item() for b in range(3)]
    assert abs(patch_contrastive_loss(P, Q, 0.2).item() - np.mean(per)) < 1e-12
    per = [alignment_shift_loss(P[b], Q[b], W[b]).item() for b in range(3)]
    assert abs(alignment_shift_loss(P, Q, W).item() - np.mean(per)) < 1e-12


def test_loss_gradients_wrt_perturbed_embeddings():
    rng = np.random.default_rng(6)
    for _ in range(20):
        P, Q, W = rng.normal(size=(4, 5)), rng.normal(size=(4, 5)) * 3, rng.normal(size=(3, 5))
        for f in (lambda q: patch_contrastive_loss(P, q, 0.5), lambda q: alignment_shift_loss(P, q, W)):
            leaf = ad.leaf(Q)
            (g,) = ad.grad_of(f(leaf), leaf)
            fd = ad.finite_difference_gradient(lambda v: f(v).item(), Q, 1e-4)
            assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6)) < 1e-5


def test_contrastive_gradient_at_default_tau():
    rng = np.random.default_rng(16)
    for _ in range(100):
        P, Q = rng.normal(size=(4, 5)), rng.normal(size=(4, 5)) * 3
        leaf = ad.leaf(Q)
        (g,) = ad.grad_of(patch_contrastive_loss(P, leaf, 0.1), leaf)
        fd = ad.finite_difference_gradient(lambda v: patch_contrastive_loss(P, v, 0.1).item(), Q, 1e-4)
        assert max_rel_err(g, fd) < 1e-5


# EMA normalisation

def ema_oracle(values, beta, eps):
    out, avg = [], None
    for v in values:
        if avg is None:
            out.append(math.copysign(1.0, v) if v != 0 else 0.0)
            avg = abs(v)
        else:
            out.append(v / (avg + eps))
            avg = beta * avg + (1 - beta) * abs(v)
    return out, avg


def test_ema_first_call_is_unit():
    s = EmaState()
    assert ema_normalize(s, "x", 5.0) == 1.0
    assert s.averages["x"] == 5.0
    assert ema_normalize(EmaState(), "y", -2.0) == -1.0


def test_ema_matches_recurrence():
    rng = np.random.default_rng(7)
    for beta in (0.0, 0.5, 0.99):
        values = list(rng.uniform(-3, 3, size=40))
        s = EmaState(beta=beta, eps=1e-8)
        got = [ema_normalize(s, "l", v) for v in values]
        ref, avg = ema_oracle(values, beta, 1e-8)
        assert np.allclose(got, ref, rtol=0, atol=1e-15)
        assert s.averages["l"] == pytest.approx(avg, abs=1e-15)


def test_ema_constant_stream_converges_to_one():
    s = EmaState()
    out = [ema_normalize(s, "c", 0.7) for _ in range(500)]
    assert abs(out[-1] - 0.7 / (0.7 + 1e-8)) < 1e-12


def test_ema_ids_independent_and_non_finite_rejected():
    s = EmaState()
    ema_normalize(s, "a", 2.0)
    ema_normalize(s, "b", 8.0)
    assert s.averages == {"a": 2.0, "b": 8.0}
    with pytest.raises(DomainError, match="'a'"):
        ema_normalize(s, "a", float("nan"))


def test_ema_scale_is_detached():
    s = EmaState()
    ema_normalize(s, "l", 4.0)
    x = ad.leaf([1.0, 2.0])
    y = ema_normalize(s, "l", ad.reduce_sum(ad.mul(x, x)))
    (g,) = ad.grad_of(y, x)
    # with a detached scale the gradient is just 2x / (ema + eps)
    assert np.allclose(g, 2 * np.array([1.0, 2.0]) / (4.0 + 1e-8), rtol=0, atol=1e-15)


# joint objective

def fixed_inputs(seed=8):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(5, 6)), rng.normal(size=(5, 6)), rng.normal(size=(3, 6))


def warmed_state(P, Q, W):
    s = EmaState()
    ema_normalize(s, "patch", 3.0)
    ema_normalize(s, "align", 0.25)
    return s


def test_objective_endpoints_and_composition():
    P, Q, W = fixed_inputs()
    lp, la = patch_contrastive_loss(P, Q, 0.1).item(), alignment_shift_loss(P, Q, W).item()
    n1, n2 = lp / (3.0 + 1e-8), la / (0.25 + 1e-8)
    for a1, expected in ((1.0, n1), (0.0, n2), (0.8, 0.8 * n1 + 0.2 * n2)):
        s = warmed_state(P, Q, W)
        J = edpa_objective(P, Q, W, ObjectiveConfig(alpha1=a1), s, update=False).item()
        assert abs(J - expected) < 1e-12


def test_objective_affine_in_alpha_with_frozen_state():
    P, Q, W = fixed_inputs(9)
    vals = [edpa_objective(P, Q, W, ObjectiveConfig(alpha1=a), warmed_state(P, Q, W), update=False).item() for a in np.linspace(0, 1, 6)]
    assert np.allclose(np.diff(vals, 2), 0.0, atol=1e-12)


def test_objective_without_normalisation_is_raw_mix():
    P, Q, W = fixed_inputs(10)
    terms = edpa_objective_terms(P, Q, W, ObjectiveConfig(alpha1=0.3, normalize=False), None)
    assert terms.objective.item() == pytest.approx(0.3 * terms.patch.item() + 0.7 * terms.align.item(), abs=1e-14)


def test_objective_config_validation():
    with pytest.raises(ConfigError):
        ObjectiveConfig(alpha1=1.5)
    with pytest.raises(ConfigError):
        ObjectiveConfig(tau=0.0)


# fine-tuning loss

def tiny_visual(seed=0):
    return init_encoders(Geometry(height=8, width=8, patch_size=4, dim=5), np.random.default_rng(seed)).visual


def test_finetune_zero_at_identity():
    v = tiny_visual()
    img = np.random.default_rng(0).random((2, 8, 8, 3))
    assert finetune_loss(v, v, img, img, 0.5).item() == 0.0


def test_finetune_reduces_to_adversarial_term():
    v = tiny_visual()
    rng = np.random.default_rng(1)
    img, adv = rng.random((3, 8, 8, 3)), rng.random((3, 8, 8, 3))
    diff = encode_visual(v, adv) - encode_visual(v, img)
    expected = 0.3 * np.mean(np.sum(diff**2, axis=(1, 2)))
    assert finetune_loss(v, v, img, adv, 0.7).item() == pytest.approx(expected, rel=1e-12)


def test_finetune_alpha2_one_ignores_adversarial_input():
    from edpa.encoders import as_leaves

    v, v0 = tiny_visual(0), tiny_visual(1)
    rng = np.random.default_rng(2)
    img, adv1, adv2 = rng.random((2, 8, 8, 3)), rng.random((2, 8, 8, 3)), rng.random((2, 8, 8, 3))
    leaves = as_leaves(v)
    g1 = ad.backward(finetune_loss(leaves, v0, img, adv1, 1.0))
    leaves2 = as_leaves(v)
    g2 = ad.backward(finetune_loss(leaves2, v0, img, adv2, 1.0))
    for k in ("proj", "hidden", "pos"):
        assert np.array_equal(g1[getattr(leaves, k)], g2[getattr(leaves2, k)])


def test_finetune_terms_and_rejections():
    v, v0 = tiny_visual(0), tiny_visual(1)
    rng = np.random.default_rng(3)
    img, adv = rng.random((2, 8, 8, 3)), rng.random((2, 8, 8, 3))
    t = finetune_terms(v, v0, img, adv, 0.25)
    assert t.loss.item() == pytest.approx(0.25 * t.clean.item() + 0.75 * t.adversarial.item(), rel=1e-14)
    with pytest.raises(ShapeError):
        finetune_loss(v, v0, img, adv[:1], 0.5)
    with pytest.raises(ConfigError):
        finetune_loss(v, v0, img, adv, 1.5)
