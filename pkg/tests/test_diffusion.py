import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hetlb import _backend
from hetlb.diffusion import (DiffusionParams, integrate_limit_sde, ode_tail,
                             sde_stationary_estimate, skorokhod_reflect)
from hetlb.errors import StepTooLarge
from hetlb.lyapunov import LyapunovContext, fluid_trajectory

from oracles import series_tail

BASE = dict(beta=2.0, mu1=2.5, muM=0.625)


def test_reflect_examples_exact():
    phi, psi = skorokhod_reflect(np.zeros(5), 0.0)
    assert not phi.any() and not psi.any()
    t = np.linspace(0.0, 3.0, 301)
    phi, psi = skorokhod_reflect(t, 1.0)
    assert np.array_equal(psi, np.maximum(t - 1.0, 0.0))
    assert np.array_equal(phi, np.minimum(t, 1.0))
    phi, psi = skorokhod_reflect([0.0, 2.0, 1.0, 3.0], 1.5)
    assert psi.tolist() == [0.0, 0.5, 0.5, 1.5] and phi.tolist() == [0.0, 1.5, 0.5, 1.5]


def test_reflect_infinite_barrier():
    x = np.array([0.3, 5.0, -1.0])
    phi, psi = skorokhod_reflect(x)
    assert np.array_equal(phi, x) and not psi.any()


paths = st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=60)


@given(paths, st.floats(0, 20))
def test_reflect_invariants(x, kappa):
    x = np.array(x)
    phi, psi = skorokhod_reflect(x, kappa)
    assert (phi <= kappa + 1e-12).all()
    assert (np.diff(psi) >= 0).all()
    assert psi[0] == max(x[0] - kappa, 0.0)
    untouched = psi == 0
    assert np.array_equal(phi[untouched], x[untouched])
    assert np.allclose(phi + psi, x)


@given(st.integers(1, 60), st.integers(0, 2**32 - 1))
def test_reflect_lipschitz(k, seed):
    rng = np.random.default_rng(seed)
    x, xp = rng.normal(0, 3, k), rng.normal(0, 3, k)
    ka, kb = rng.uniform(0, 3, 2)
    d = np.abs(skorokhod_reflect(x, ka)[1] - skorokhod_reflect(xp, kb)[1]).max()
    assert d <= np.abs(x - xp).max() + abs(ka - kb) + 1e-12


def test_params_validation():
    with pytest.raises(ValueError):
        DiffusionParams(2.0, 0.5, 0.625)
    with pytest.raises(ValueError):
        DiffusionParams(2.0, 2.5, 0.625, h=0.0)
    with pytest.raises(ValueError):
        DiffusionParams(2.0, 2.5, 0.625, speeds=(3.0, 0.625))


@pytest.mark.parametrize("x", [(-1.0, 3.0), (-3.0, 0.5), (-0.2, 5.0), (0.0, 1.0)])
def test_zero_noise_follows_fluid(x):
    ctx = LyapunovContext(1, 2.0, 2.5, 0.625, 1.0)
    errs = []
    for h in (2e-3, 1e-3):
        p = DiffusionParams(**BASE, sigma=0.0, h=h, horizon=6.0)
        path = integrate_limit_sde(p, (x[0], x[1], None))
        fl = np.array([fluid_trajectory(x, t, ctx) for t in path.times])
        errs.append(max(np.abs(path.yM1 - fl[:, 0]).max(), np.abs(path.y12 - fl[:, 1]).max()))
    assert errs[0] < 20 * 2e-3
    assert errs[1] < 0.7 * errs[0] or errs[1] < 1e-12


def test_zero_noise_from_origin():
    p = DiffusionParams(**BASE, sigma=0.0, h=1e-3, horizon=4.0)
    path = integrate_limit_sde(p)
    exact = -(2.0 / 0.625) * (1 - np.exp(-0.625 * path.times))
    assert (path.yM1 <= 0).all() and not path.u1.any()
    assert np.abs(path.yM1 - exact).max() < 5e-3


def test_zero_noise_fluid_identity_per_step():
    p = DiffusionParams(**BASE, sigma=0.0, h=1e-3, horizon=1.0)
    path = integrate_limit_sde(p, (-4.0, 0.5, None))
    s = path.yM1 + path.y12
    inc = np.diff(s)
    pred = p.h * (-p.beta - p.muM * path.yM1[:-1])
    free = np.diff(path.u1) == 0
    np.testing.assert_allclose(inc[free], pred[free], atol=1e-12)


def test_paths_deterministic_and_complementary():
    p = DiffusionParams(**BASE, h=5e-3, horizon=20.0)
    a = integrate_limit_sde(p, (-0.5, 0.2, None), seed=4)
    b = integrate_limit_sde(p, (-0.5, 0.2, None), seed=4)
    assert np.array_equal(a.yM1, b.yM1) and np.array_equal(a.u1, b.u1)
    assert (a.yM1 <= 0).all() and (a.y12 >= 0).all()
    du = np.diff(a.u1)
    assert (du >= 0).all() and du.max() > 0
    assert (a.yM1[1:][du > 0] == 0).all()


@pytest.mark.skipif(not _backend.COMPILED, reason="extension not built")
def test_sde_backends_identical():
    p = DiffusionParams(**BASE, h=5e-3, horizon=5.0, speeds=(2.5, 1.0, 0.625))
    tail = [[0.3, 0.1], [0.2, 0.0], [0.1, 0.05]]
    a = integrate_limit_sde(p, (-0.5, 0.3, tail), seed=2, record_tail=True, backend="compiled")
    b = integrate_limit_sde(p, (-0.5, 0.3, tail), seed=2, record_tail=True, backend="python")
    assert np.array_equal(a.yM1, b.yM1) and np.array_equal(a.tail, b.tail)


def test_record_stride_is_a_subsample():
    p = DiffusionParams(**BASE, h=5e-3, horizon=3.0)
    full = integrate_limit_sde(p, seed=1)
    thin = integrate_limit_sde(p, seed=1, record_every=7)
    assert np.array_equal(thin.yM1, full.yM1[::7][:len(thin.yM1)])


def test_step_too_large():
    p = DiffusionParams(**BASE, sigma=0.0, h=1.0, horizon=3.0)
    with pytest.raises(StepTooLarge):
        integrate_limit_sde(p, (-1.0, 1.0, None))


def test_step_halving_with_shared_brownian_motion():
    T, h_fine = 2.0, 2 ** -12
    z = np.random.default_rng(7).standard_normal(int(T / h_fine))
    ref = integrate_limit_sde(DiffusionParams(**BASE, h=h_fine, horizon=T), (-0.2, 0.1, None),
                              normals=z)
    dists = []
    for level in (6, 4, 2):
        m = 2 ** level
        coarse = z.reshape(-1, m).sum(axis=1) / math.sqrt(m)
        path = integrate_limit_sde(DiffusionParams(**BASE, h=h_fine * m, horizon=T),
                                   (-0.2, 0.1, None), normals=coarse)
        dists.append(np.abs(path.yM1 - ref.yM1[::m]).max())
    assert dists[0] > dists[1] > dists[2]


def test_ode_tail_examples():
    assert not ode_tail(np.zeros(4), 1.3, 2.0).any()
    out = ode_tail([0.0, 0.0, 2.0], 0.8, [0.0, 0.5, 3.0])
    np.testing.assert_allclose(out[:, -1], 2.0 * np.exp(-0.8 * np.array([0.0, 0.5, 3.0])),
                               rtol=1e-13)
    for t in (0.01, 0.1, 0.7):
        np.testing.assert_allclose(ode_tail([0.4, 1.5], 2.5, t), series_tail([0.4, 1.5], 2.5, t),
                                   rtol=1e-12)


@given(st.lists(st.floats(0, 5), min_size=1, max_size=8), st.floats(0.1, 3), st.floats(0, 4))
def test_ode_tail_matches_series(y, mu, t):
    np.testing.assert_allclose(ode_tail(y, mu, t), series_tail(y, mu, t), rtol=1e-9, atol=1e-12)


def test_integrator_tail_tracks_ode_solution():
    p = DiffusionParams(**BASE, sigma=0.0, h=1e-4, horizon=1.0, speeds=(2.5, 1.0, 0.625))
    tail = [[0.0, 0.0], [0.5, 0.2], [0.3, 0.0]]
    path = integrate_limit_sde(p, (-5.0, 0.0, tail), record_tail=True, record_every=1000)
    for j, mu in ((1, 1.0), (2, 0.625)):
        exact = ode_tail(np.array(tail[j]), mu, path.times)
        np.testing.assert_allclose(path.tail[:, j, :2], exact, atol=2e-4)


def test_stationary_zero_noise_and_large_beta():
    m = sde_stationary_estimate(DiffusionParams(**BASE, sigma=0.0), 10.0, 100.0)
    np.testing.assert_allclose(m.mean, [-2.0 / 0.625, 0.0], atol=1e-12)
    big = sde_stationary_estimate(DiffusionParams(20.0, 2.5, 0.625), 10.0, 500.0, seed=1)
    assert big.mean[1] < 1e-6


def test_stationary_moments_stable_under_step_halving():
    ests = [sde_stationary_estimate(DiffusionParams(**BASE, h=h), 50.0, 20_000.0, seed=s)
            for h, s in ((1e-2, 1), (5e-3, 2))]
    for k in range(2):
        diff = ests[0].mean[k] - ests[1].mean[k]
        assert abs(diff) <= 3 * math.hypot(ests[0].se[k], ests[1].se[k])
    assert ests[1].samples is None and (ests[1].var >= 0).all()
