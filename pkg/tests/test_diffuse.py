import numpy as np
import pytest

from oracles import scalar_ddim_step, scalar_ddpm_step
from voxgen.diffuse import (
    ScheduleTable,
    ddim_step,
    ddim_times,
    ddpm_step,
    forward_mix,
    make_schedule,
    renoise,
)
from voxgen.errors import TopologyMismatch
from voxgen.grid import N_CHANNELS, SparseGrid

from conftest import make_grid


def one_voxel_grid(values):
    feats = np.asarray(values, dtype=np.float64).reshape(N_CHANNELS, 1)
    return SparseGrid.create(1, 4, [[1, 1, 1]], feats, 0.5)


# ---------------------------------------------------------------------------
# schedule


def test_schedule_boundary_identities():
    s = make_schedule(1000, 3)
    assert s.alpha_bar[0] == 1.0
    assert s.gamma[0] == 1.0
    assert s.gamma[1000] == 0.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all(np.diff(s.gamma) <= 0)
    assert s.per_level_start == (1000, 300, 300)


def test_schedule_alpha_bar_terminal():
    # direct product evaluation of the linear beta schedule
    s = make_schedule(1000, 2)
    betas = np.linspace(1e-4, 2e-2, 1000)
    expect = np.prod(1.0 - betas)
    np.testing.assert_allclose(s.alpha_bar[1000], expect, rtol=1e-12)
    assert abs(s.alpha_bar[1000] - 4.0e-5) < 2e-5


def test_schedule_start_clamped():
    s = make_schedule(100, 4)
    assert s.per_level_start == (100, 100, 100, 100)


# ---------------------------------------------------------------------------
# forward_mix


def test_forward_mix_t0_identity(rng):
    s = make_schedule(50, 2)
    gt = make_grid([[0, 0, 0], [1, 1, 1]], rng=rng)
    noise = rng.standard_normal((N_CHANNELS, 2))
    out = forward_mix(gt, None, 0, noise, s)
    np.testing.assert_allclose(out.features, gt.features)


def test_forward_mix_equal_grids_collapse(rng):
    s = make_schedule(50, 2)
    gt = make_grid([[0, 0, 0], [1, 1, 1]], rng=rng)
    zero = np.zeros((N_CHANNELS, 2))
    for t in (1, 10, 37, 50):
        mixed = forward_mix(gt, gt, t, zero, s)
        direct = forward_mix(gt, None, t, zero, s)
        np.testing.assert_allclose(mixed.features, direct.features, atol=1e-12)


def test_forward_mix_terminal_attenuation():
    # level 1, t = T, zero noise: features scaled by sqrt(alpha_bar(T))
    s = make_schedule(1000, 1)
    gt = one_voxel_grid(np.arange(10) + 1.0)
    out = forward_mix(gt, None, 1000, np.zeros((10, 1)), s)
    factor = out.features[0, 0] / gt.features[0, 0]
    np.testing.assert_allclose(factor, np.sqrt(s.alpha_bar[1000]), rtol=1e-9)
    assert abs(factor - 0.0063) < 2e-3


def test_forward_mix_linearity(rng):
    s = make_schedule(100, 2)
    gt = make_grid([[0, 0, 0], [2, 1, 0]], rng=rng)
    up = gt.with_features(rng.standard_normal((N_CHANNELS, 2)))
    noise = rng.standard_normal((N_CHANNELS, 2))
    c = 3.7
    t = 42
    out1 = forward_mix(gt, up, t, noise, s)
    gt_c = gt.with_features(gt.features * c)
    up_c = up.with_features(up.features * c)
    out2 = forward_mix(gt_c, up_c, t, c * noise, s)
    np.testing.assert_allclose(out2.features, c * out1.features, rtol=1e-12)


def test_forward_mix_topology_mismatch(rng):
    s = make_schedule(10, 2)
    gt = make_grid([[0, 0, 0]], rng=rng)
    up = make_grid([[1, 0, 0]], rng=rng)
    with pytest.raises(TopologyMismatch):
        forward_mix(gt, up, 1, np.zeros((10, 1)), s)


# ---------------------------------------------------------------------------
# ddpm_step


def test_ddpm_terminal_step_deterministic(rng):
    s = make_schedule(10, 1)
    x0 = one_voxel_grid(rng.standard_normal(10))
    xt = one_voxel_grid(rng.standard_normal(10))
    a = ddpm_step(x0, xt, 1, None, s)
    b = ddpm_step(x0, xt, 1, None, s)
    np.testing.assert_array_equal(a.features, b.features)


def test_ddpm_fixed_point_on_flat_schedule(rng):
    # x0 == G_t with a flat alpha_bar: posterior mean returns G_t
    ab = np.full(6, 0.5)
    ab[0] = 1.0
    s = ScheduleTable(5, ab, np.linspace(1, 0, 6), (5,))
    x = one_voxel_grid(rng.standard_normal(10))
    out = ddpm_step(x, x, 3, np.zeros((10, 1)), s)
    np.testing.assert_allclose(out.features, x.features, atol=1e-12)


def test_ddpm_matches_scalar_oracle(rng):
    s = make_schedule(4, 1)
    for t in (1, 2, 3, 4):
        x0v = rng.standard_normal(10)
        xtv = rng.standard_normal(10)
        nv = rng.standard_normal(10)
        out = ddpm_step(
            one_voxel_grid(x0v), one_voxel_grid(xtv), t, nv.reshape(10, 1), s
        )
        expect = np.array(
            [
                scalar_ddpm_step(x0v[c], xtv[c], t, s.alpha_bar, nv[c])
                for c in range(10)
            ]
        )
        np.testing.assert_allclose(out.features[:, 0], expect, atol=1e-12)


# ---------------------------------------------------------------------------
# ddim_step


def test_ddim_to_zero_returns_x0(rng):
    s = make_schedule(10, 1)
    x0 = one_voxel_grid(rng.standard_normal(10))
    xt = one_voxel_grid(rng.standard_normal(10))
    out = ddim_step(x0, xt, 5, 0, s)
    np.testing.assert_allclose(out.features, x0.features, atol=1e-12)


def test_ddim_deterministic(rng):
    s = make_schedule(100, 1)
    x0 = one_voxel_grid(rng.standard_normal(10))
    xt = one_voxel_grid(rng.standard_normal(10))
    a = ddim_step(x0, xt, 50, 40, s)
    b = ddim_step(x0, xt, 50, 40, s)
    np.testing.assert_array_equal(a.features, b.features)


def test_ddim_matches_scalar_oracle(rng):
    s = make_schedule(100, 1)
    for t, tp in [(100, 90), (50, 25), (7, 0), (2, 1)]:
        x0v = rng.standard_normal(10)
        xtv = rng.standard_normal(10)
        out = ddim_step(one_voxel_grid(x0v), one_voxel_grid(xtv), t, tp, s)
        expect = np.array(
            [scalar_ddim_step(x0v[c], xtv[c], t, tp, s.alpha_bar) for c in range(10)]
        )
        np.testing.assert_allclose(out.features[:, 0], expect, atol=1e-12)


def test_ddim_full_sequence_matches_zero_noise_ddpm(rng):
    # x0-consistent input: the noisy grid sits exactly on the clean
    # trajectory sqrt(alpha_bar(t)) * x0; both steppers then track it
    s = make_schedule(20, 1)
    x0v = rng.standard_normal(10)
    x0 = one_voxel_grid(x0v)
    xt_ddim = one_voxel_grid(np.sqrt(s.alpha_bar[20]) * x0v)
    xt_ddpm = xt_ddim
    zero = np.zeros((10, 1))
    for t in range(20, 0, -1):
        xt_ddim = ddim_step(x0, xt_ddim, t, t - 1, s)
        xt_ddpm = ddpm_step(x0, xt_ddpm, t, zero, s)
        np.testing.assert_allclose(xt_ddim.features, xt_ddpm.features, atol=1e-8)
        expect = np.sqrt(s.alpha_bar[t - 1]) * x0v
        np.testing.assert_allclose(xt_ddim.features[:, 0], expect, atol=1e-8)


def test_ddim_times_strides():
    pairs = ddim_times(1000)
    assert len(pairs) == 100
    assert pairs[0] == (1000, 990)
    assert pairs[-1] == (10, 0)
    pairs = ddim_times(300)
    assert len(pairs) == 30
    assert pairs[-1] == (10, 0)
    pairs = ddim_times(25, stride=10)
    assert pairs == [(25, 15), (15, 5), (5, 0)]


def test_forward_mix_marginal_statistics(rng):
    # composing forward_mix with the ddpm posterior on a 1-voxel grid
    # reproduces the marginal mean/variance within Monte-Carlo error
    s = make_schedule(50, 1)
    t = 30
    gt_val = 0.8
    gt = one_voxel_grid(np.full(10, gt_val))
    draws = 10_000
    samples = np.empty(draws)
    for i in range(draws):
        noise = rng.standard_normal((10, 1))
        samples[i] = forward_mix(gt, None, t, noise, s).features[0, 0]
    ab = s.alpha_bar[t]
    mean_expect = np.sqrt(ab) * gt_val
    std_expect = np.sqrt(1 - ab)
    se = std_expect / np.sqrt(draws)
    assert abs(samples.mean() - mean_expect) < 3 * se
    var_se = std_expect**2 * np.sqrt(2.0 / (draws - 1))
    assert abs(samples.var() - (1 - ab)) < 3 * var_se


def test_renoise_matches_formula(rng):
    s = make_schedule(100, 2)
    g = make_grid([[0, 0, 0]], rng=rng)
    noise = rng.standard_normal((10, 1))
    out = renoise(g, 30, noise, s)
    expect = np.sqrt(s.alpha_bar[30]) * g.features + np.sqrt(
        1 - s.alpha_bar[30]
    ) * noise
    np.testing.assert_allclose(out.features, expect, rtol=1e-6)
