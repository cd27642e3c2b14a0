import numpy as np
import pytest

from edpa import autodiff as ad
from edpa.attack import (
    AttackAborted,
    AttackConfig,
    PatchTrajectory,
    attack_step,
    edpa_attack,
    make_batch,
    objective_gradient,
    sample_masks,
)
from edpa.errors import ConfigError
from edpa.losses import EmaState, ObjectiveConfig
from edpa.patching import AdvPatch, load_patch

CFG = dict(patch_h=5, patch_w=6, batch_size=4, snapshot_every=3)


def frozen_ema():
    s = EmaState()
    s.averages.update({"patch": 0.7, "align": 0.05})
    return s


def setup(encoders, samples, n=2, seed=0):
    rng = np.random.default_rng(seed)
    batch = make_batch(samples[:n], encoders)
    masks = sample_masks(rng, n, (32, 32), (5, 6))
    return rng.random((5, 6, 3)), batch, masks


def test_zero_step_leaves_patch(tiny_encoders, tiny_samples):
    pixels, batch, masks = setup(tiny_encoders, tiny_samples)
    out = attack_step(pixels, batch, tiny_encoders.visual, masks, ObjectiveConfig(), EmaState(), 0.0)
    assert np.array_equal(out.pixels, pixels)


def test_step_is_bounded_sign_move(tiny_encoders, tiny_samples):
    pixels, batch, masks = setup(tiny_encoders, tiny_samples)
    pixels[0, 0] = [0.0, 1.0, 0.999]
    eta = 2 / 255
    out = attack_step(pixels, batch, tiny_encoders.visual, masks, ObjectiveConfig(), EmaState(), eta)
    assert np.max(np.abs(out.pixels - pixels)) <= eta + 1e-15
    assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0
    free = (pixels > eta) & (pixels < 1 - eta) & (out.grad != 0)
    assert np.allclose(out.pixels[free] - pixels[free], eta * np.sign(out.grad[free]), atol=1e-15)


def test_batch_gradient_is_mean_of_per_sample(tiny_encoders, tiny_samples):
    pixels, batch, masks = setup(tiny_encoders, tiny_samples)
    cfg = ObjectiveConfig()
    _, g = objective_gradient(pixels, batch, tiny_encoders.visual, masks, cfg, frozen_ema(), update_ema=False)
    per = []
    for i in range(2):
        one = make_batch(tiny_samples[i:i + 1], tiny_encoders)
        per.append(objective_gradient(pixels, one, tiny_encoders.visual, masks[i:i + 1], cfg, frozen_ema(), update_ema=False)[1])
    assert np.max(np.abs(g - (per[0] + per[1]) / 2)) < 1e-9


def test_objective_gradient_matches_finite_differences(tiny_encoders, tiny_samples):
    pixels, batch, masks = setup(tiny_encoders, tiny_samples, seed=3)
    cfg = ObjectiveConfig(alpha1=0.6)
    _, g = objective_gradient(pixels, batch, tiny_encoders.visual, masks, cfg, frozen_ema(), update_ema=False)

    def f(px):
        terms, _ = objective_gradient(px, batch, tiny_encoders.visual, masks, cfg, frozen_ema(), update_ema=False)
        return terms.objective.item()

    fd = ad.finite_difference_gradient(f, pixels, 1e-4)
    big = np.abs(fd) > 1e-8
    assert np.max(np.abs(g[big] - fd[big]) / np.abs(fd[big])) < 1e-5


def test_single_iteration_trajectory(tiny_encoders, tiny_samples):
    traj = edpa_attack(tiny_samples, tiny_encoders, AttackConfig(iterations=1, **CFG))
    (i0, p0, j0), (i1, p1, _) = traj.snapshots
    assert (i0, i1) == (0, 1)
    step = np.abs(p1.pixels - p0.pixels)
    assert np.max(step) <= 2 / 255 + 1e-15
    assert len(traj.log) == 1 and traj.log[0]["J"] == j0


def test_snapshots_cadence_and_box(tiny_encoders, tiny_samples):
    traj = edpa_attack(tiny_samples, tiny_encoders, AttackConfig(iterations=10, **CFG))
    assert [s[0] for s in traj.snapshots] == [0, 3, 6, 9, 10]
    for _, p, _ in traj.snapshots:
        assert p.pixels.min() >= 0.0 and p.pixels.max() <= 1.0


def test_same_seed_bit_identical_files(tiny_encoders, tiny_samples, tmp_path):
    for tag in "ab":
        traj = edpa_attack(tiny_samples, tiny_encoders, AttackConfig(iterations=6, seed=9, **CFG))
        traj.save(tmp_path / tag)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "trajectory.json" in files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert np.array_equal(load_patch(tmp_path / "a" / files[0]).pixels, traj.snapshots[0][1].pixels)


def test_fixed_position_uses_given_origin(tiny_encoders, tiny_samples):
    rng = np.random.default_rng(0)
    masks = sample_masks(rng, 3, (32, 32), (5, 6), "fixed", (4, 7))
    assert all(m.origin == (4, 7) for m in masks)
    cfg = AttackConfig(iterations=3, position="fixed", fixed_row=27, fixed_col=26, **CFG)
    edpa_attack(tiny_samples, tiny_encoders, cfg)
    with pytest.raises(Exception):
        edpa_attack(tiny_samples, tiny_encoders, AttackConfig(iterations=1, position="fixed", fixed_row=28, **CFG))


def test_encoders_untouched(tiny_encoders, tiny_samples):
    before = {k: v.copy() for k, v in tiny_encoders.tensors().items()}
    edpa_attack(tiny_samples, tiny_encoders, AttackConfig(iterations=4, **CFG))
    for k, v in tiny_encoders.tensors().items():
        assert np.array_equal(v, before[k])


def test_divergence_flushes_partial_trajectory(tiny_encoders, tiny_samples, monkeypatch):
    import edpa.attack as attack_mod

    real = attack_mod.attack_step
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 5:
            pixels = args[0]
            bad = np.full_like(pixels, np.nan)
            return real(bad, *args[1:], **kwargs)
        return real(*args, **kwargs)

    monkeypatch.setattr(attack_mod, "attack_step", flaky)
    with pytest.raises(AttackAborted, match="iteration 5") as info:
        edpa_attack(tiny_samples, tiny_encoders, AttackConfig(iterations=10, **CFG))
    iters = [s[0] for s in info.value.trajectory.snapshots]
    assert iters == [0, 3, 5]


def test_trajectory_rejects_out_of_order():
    t = PatchTrajectory()
    p = AdvPatch(np.zeros((1, 1, 3)))
    t.add(2, p, 0.0)
    with pytest.raises(ValueError):
        t.add(2, p, 0.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig(batch_size=0)
    with pytest.raises(ConfigError):
        AttackConfig(position="corner")
