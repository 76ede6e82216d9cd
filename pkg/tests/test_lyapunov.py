import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from hetlb.lyapunov import (OMEGA1, OMEGA2, OMEGA3, LyapunovContext, RegionTag, L_apply,
                            boundary_times, classify_region, drift_V, f_star, fluid_trajectory,
                            g_tau, grad_f_star, hess_diag_f_star, hess_f_star, pde_residual,
                            solve_tau, tau_sensitivities, x2_star)
from hetlb.model import OccupancyState, proportioned_config
from hetlb.policy import SA_JSQ_KIND, enumerate_decisions

from oracles import bisect

CTX = LyapunovContext(100, 2.0, 2.5, 0.625, 1.0)
THR = CTX.threshold
points = st.tuples(st.one_of(st.just(0.0), st.floats(-5, -1e-9)), st.floats(0, 5))


def first_root_oracle(x, ctx=CTX, T=60.0, m=60_000):
    """First sign change of g on a fine grid, refined by bisection."""
    ts = np.linspace(0, T, m)
    g = np.array([g_tau(x, t, ctx) for t in ts])
    idx = np.nonzero(g >= 0)[0]
    if idx.size == 0:
        return math.inf
    k = idx[0]
    if k == 0:
        return 0.0
    return bisect(lambda t: g_tau(x, t, ctx), ts[k - 1], ts[k])


def test_context_validation():
    with pytest.raises(ValueError):
        LyapunovContext(100, 2.0, 2.5, 0.625, 0.8)
    with pytest.raises(ValueError):
        LyapunovContext(100, 2.0, 0.5, 0.625, 5.0)


def test_g_tau_limits():
    x = (-0.3, 0.7)
    assert g_tau(x, 0.0, CTX) == pytest.approx(-0.3, abs=1e-15)
    assert g_tau((0.0, 2.0), 0.0, CTX) == pytest.approx(0.0, abs=1e-15)
    assert g_tau(x, 200.0, CTX) == pytest.approx(-CTX.b, rel=1e-12)


def test_solve_tau_examples():
    assert solve_tau((0.0, 2 * THR), CTX) == 0.0
    assert solve_tau((-0.5, 0.0), CTX) == math.inf
    x = (-0.05, 0.30)
    tau = solve_tau(x, CTX)
    assert math.isfinite(tau)
    assert tau == pytest.approx(first_root_oracle(x), abs=1e-10)


@given(points)
def test_solve_tau_matches_oracle(x):
    tau = solve_tau(x, CTX)
    ref = first_root_oracle(x, m=4000)
    if math.isinf(ref):
        # a grazing root can hide between grid points; it must then be a near-tangency
        if math.isfinite(tau):
            assert abs(tau_sensitivities(x, tau, CTX)[0]) > 1e3 or max(
                g_tau(x, t, CTX) for t in np.linspace(0, 60, 4000)) > -1e-3
        return
    assert tau == pytest.approx(ref, abs=1e-9)


def test_x2_star_examples():
    assert x2_star(0.0, 1.0, CTX) == THR

    def tau_of(x2):
        return solve_tau((-0.1, x2), CTX)

    def F(x2):
        t = tau_of(x2)
        return -1.0 if math.isinf(t) else x2 * math.exp(-CTX.mu1 * t) - THR

    ref = bisect(F, THR, 50.0)
    assert x2_star(-0.1, 1.0, CTX) == pytest.approx(ref, abs=1e-9)
    xs = [x2_star(x1, 1.0, CTX) for x1 in np.linspace(0, -5, 40)]
    assert all(b >= a for a, b in zip(xs, xs[1:]))


@given(st.floats(-5, -1e-3), st.floats(0.81, 3.0), st.floats(1e-3, 2.0))
def test_curves_are_ordered_in_kappa(x1, kb, gap):
    assert x2_star(x1, kb + gap, CTX) > x2_star(x1, kb, CTX)


def test_classify_examples():
    assert classify_region((-1.0, THR / 2), CTX).region == OMEGA1
    r = classify_region((0.0, 2 * THR), CTX)
    assert r.region == OMEGA3 and r.tau == 0.0 and r.name == "Omega3"
    x1 = -0.7
    on = (x1, x2_star(x1, CTX.kappa, CTX))
    assert classify_region(on, CTX).region == OMEGA2


@given(points)
def test_region_invariants(x):
    r = classify_region(x, CTX)
    assert (r.region == OMEGA1) == (x[1] <= THR)
    if r.region == OMEGA3:
        assert math.isfinite(r.tau)
        assert x[1] * math.exp(-CTX.mu1 * r.tau) >= THR * (1 - 1e-12)


def test_f_star_examples():
    assert f_star((-2.0, THR * 0.9), CTX) == 0.0
    x = (-3.0, math.e * THR)
    assert classify_region(x, CTX).region == OMEGA2
    assert f_star(x, CTX) == pytest.approx(CTX.kappa * (math.e - 2) / (CTX.mu1 * CTX.rn), rel=1e-14)
    x2 = 0.6
    assert f_star((0.0, x2), CTX) == pytest.approx(CTX.rn / (2 * CTX.beta) * (x2 - THR) ** 2,
                                                   rel=1e-14)


def test_boundary_gradient_and_operator():
    for x2 in (0.11, 0.5, 3.0):
        f1, f2 = grad_f_star((0.0, x2), CTX)
        expected = CTX.rn / CTX.beta * (x2 - THR)
        assert abs(f1 - expected) <= 1e-12 * max(1, expected)
        assert abs(f2 - expected) <= 1e-12 * max(1, expected)
        assert L_apply((f1, f2), (0.0, x2), CTX) == pytest.approx(-(x2 - THR), abs=1e-12)


def test_gradient_zero_outside_omega3():
    for x in ((-1.0, 0.05), (-4.0, 0.3)):
        assert classify_region(x, CTX).region != OMEGA3
        assert grad_f_star(x, CTX)[0] == 0.0


def _fd(fun, x, k, rel=1e-6):
    h = rel * max(abs(x[0]), abs(x[1]), 1e-3)
    e = np.zeros(2)
    e[k] = h
    return (np.asarray(fun(np.asarray(x) + e)) - np.asarray(fun(np.asarray(x) - e))) / (2 * h), h


@given(points)
def test_derivatives_match_finite_differences(x):
    r = classify_region(x, CTX)
    if r.region == OMEGA1:
        return
    grad = grad_f_star(x, CTX, r)
    f11, f12, f22 = hess_f_star(x, CTX, r)
    if x[0] > -1e-3:
        return  # stencil would leave the domain
    for k in range(2):
        d, h = _fd(lambda y: f_star(y, CTX), x, k)
        near = [classify_region(np.asarray(x) + s * np.eye(2)[k] * h * 1e3, CTX).region
                for s in (-1, 1)]
        if near != [r.region] * 2:
            return
        assert abs(d - grad[k]) <= 1e-5 * max(abs(grad[k]), 1e-3)
    dg1, _ = _fd(lambda y: grad_f_star(y, CTX), x, 0)
    dg2, _ = _fd(lambda y: grad_f_star(y, CTX), x, 1)
    for analytic, numeric in ((f11, dg1[0]), (f12, dg2[0]), (f22, dg2[1])):
        assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), 1e-2)


@given(points)
def test_signs_and_bounds(x):
    r = classify_region(x, CTX)
    f1, _ = grad_f_star(x, CTX, r)
    f11, f12, f22 = hess_f_star(x, CTX, r)
    assert min(f1, f11, f12, f22) >= -1e-10
    assert f11 <= CTX.c5() * CTX.rn and f22 <= CTX.c6() * CTX.rn
    assert hess_diag_f_star(x, CTX, r) == (f11, f22)


def test_hessian_examples():
    assert hess_diag_f_star((-1.0, THR / 3), CTX) == (0.0, 0.0)
    x = (-4.0, 0.3)
    assert classify_region(x, CTX).region == OMEGA2
    f22 = hess_diag_f_star(x, CTX)[1]
    assert f22 == pytest.approx(CTX.kappa / (CTX.mu1 * CTX.rn * 0.09), rel=1e-14)
    assert f22 <= CTX.rn / (CTX.mu1 * CTX.kappa)


def test_operator_linearity():
    x = (-0.4, 1.2)
    g, h = np.array([0.3, -1.1]), np.array([2.0, 0.7])
    assert L_apply((0.0, 0.0), x, CTX) == 0.0
    lhs = L_apply(2.5 * g - 1.5 * h, x, CTX)
    assert lhs == pytest.approx(2.5 * L_apply(g, x, CTX) - 1.5 * L_apply(h, x, CTX), rel=1e-13)


@given(points)
def test_pde_residual(x):
    r = classify_region(x, CTX)
    res = pde_residual(x, CTX, r)
    if r.region == OMEGA1:
        assert res == 0.0
    elif r.region == OMEGA2:
        assert abs(res) <= 1e-12
    else:
        assert abs(res) <= 1e-8


def test_branches_agree_on_the_curve():
    for x1 in np.linspace(-0.01, -4.5, 15):
        x = (x1, x2_star(x1, CTX.kappa, CTX))
        tau = solve_tau(x, CTX)
        a, b = RegionTag(OMEGA2), RegionTag(OMEGA3, tau)
        assert f_star(x, CTX, a) == pytest.approx(f_star(x, CTX, b), abs=1e-9)
        for u, v in zip(grad_f_star(x, CTX, a), grad_f_star(x, CTX, b)):
            assert u == pytest.approx(v, abs=1e-9)
    # and across x2 = kappa / sqrt(n)
    x = (-1.0, THR)
    assert f_star(x, CTX, RegionTag(OMEGA2)) == pytest.approx(0.0, abs=1e-15)
    assert grad_f_star(x, CTX, RegionTag(OMEGA2))[1] == pytest.approx(0.0, abs=1e-15)


@given(points)
def test_tau_decreases_in_both_coordinates(x):
    r = classify_region(x, CTX)
    if r.region != OMEGA3 or r.tau == 0.0:
        return
    t1, t2 = tau_sensitivities(x, r.tau, CTX)
    assert t1 <= 0 and t2 <= 0
    h = 1e-7
    if x[0] + h < 0 and classify_region((x[0] + h, x[1]), CTX).region == OMEGA3:
        assert solve_tau((x[0] + h, x[1]), CTX) <= r.tau + 1e-12
    assert solve_tau((x[0], x[1] + h), CTX) <= r.tau + 1e-12


def test_fluid_trajectory_basics():
    x = (-0.8, 1.5)
    assert fluid_trajectory(x, 0.0, CTX) == x
    tau = solve_tau(x, CTX)
    for t in np.linspace(0, tau * 0.99, 7):
        assert fluid_trajectory(x, t, CTX)[1] == pytest.approx(x[1] * math.exp(-CTX.mu1 * t),
                                                               rel=1e-14)
    hit, leave = boundary_times(x, CTX)
    mid = fluid_trajectory(x, 0.5 * (hit + leave), CTX)
    assert mid[0] == 0.0
    late = fluid_trajectory(x, leave + 50, CTX)
    assert late[0] == pytest.approx(-CTX.b, rel=1e-6) and late[1] < 1e-12


@pytest.mark.parametrize("x", [(-0.05, 0.3), (-0.8, 1.5), (-3.0, 4.0), (-2.0, 0.4), (0.0, 2.0),
                               (-4.9, 0.2), (-1.0, 0.05)])
def test_f_star_equals_integral_along_flow(x):
    hit, leave = boundary_times(x, CTX)
    brk = [t for t in (hit, leave) if math.isfinite(t)]
    end = (max(brk) if brk else 0.0) + 40.0

    def excess(s):
        return max(fluid_trajectory(x, s, CTX)[1] - THR, 0.0)

    val, _ = integrate.quad(excess, 0.0, end, points=brk or None, limit=500,
                            epsabs=1e-12, epsrel=1e-12)
    assert f_star(x, CTX) == pytest.approx(val, abs=1e-6)


def test_drift_V_examples():
    cfg = proportioned_config(100)
    empty = OccupancyState.empty(cfg)
    V, gen = drift_V(empty, cfg)
    assert V == 20 and gen == pytest.approx(-cfg.arrival_rate)
    c = np.zeros((2, 4), dtype=np.int64)
    c[0, 0], c[1, 0] = 20, 30
    assert drift_V(OccupancyState(c), cfg)[0] == 0


def _generator_oracle(q, cfg):
    """Sum over all transitions of rate times the change in V."""
    c = np.array(q.counts)

    def V(m):
        return sum(cfg.pool_sizes[:-1]) - m[:-1, 0].sum()

    v0 = V(c)
    total = 0.0
    for dec, p in enumerate_decisions(SA_JSQ_KIND, q, cfg).items():
        m = c.copy()
        m[dec.pool, dec.target_level] += 1
        total += cfg.arrival_rate * float(p) * (V(m) - v0)
    for j in range(cfg.M):
        for i in range(c.shape[1]):
            nxt = c[j, i + 1] if i + 1 < c.shape[1] else 0
            rate = cfg.speeds[j] * (c[j, i] - nxt)
            if rate:
                m = c.copy()
                m[j, i] -= 1
                total += rate * (V(m) - v0)
    return total


@given(st.lists(st.integers(0, 3), min_size=10, max_size=10))
def test_drift_V_matches_generator(lengths):
    cfg = proportioned_config(10, beta=1.0)
    q = OccupancyState.from_queue_lengths(cfg, [lengths[:2], lengths[2:]])
    assert drift_V(q, cfg)[1] == pytest.approx(_generator_oracle(q, cfg), abs=1e-12)


def test_drift_negative_when_fast_pool_has_idle_servers():
    cfg = proportioned_config(1000)
    rng = np.random.default_rng(0)
    for _ in range(200):
        fast = rng.integers(0, 4, size=cfg.pool_sizes[0])
        fast[rng.integers(0, len(fast))] = 0
        slow = rng.integers(0, 4, size=cfg.pool_sizes[1])
        q = OccupancyState.from_queue_lengths(cfg, [fast.tolist(), slow.tolist()])
        V, gen = drift_V(q, cfg)
        assert V >= 1 and gen < 0
