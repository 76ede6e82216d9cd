import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from hetlb import _backend
from hetlb.ctmc_sim import (Simulator, exact_stationary_small, functional_names,
                            rate_conservation_check, simulate_stationary, simulate_transient, step)
from hetlb.errors import InsufficientBatches, StateSpaceTooLarge
from hetlb.model import OccupancyState, SystemConfig, proportioned_config, validate_config
from hetlb.policy import JIQ_KIND, JSQ_KIND, SA_JSQ_KIND, parse_policy, pod

from oracles import mm1k

ALL_KINDS = [SA_JSQ_KIND, JSQ_KIND, pod(2), JIQ_KIND]
needs_compiled = pytest.mark.skipif(not _backend.COMPILED, reason="extension not built")


def test_step_from_empty_is_an_arrival_to_the_fast_pool():
    cfg = proportioned_config(10)
    q, rec = step(OccupancyState.empty(cfg), cfg, SA_JSQ_KIND, np.random.default_rng(0))
    assert rec.kind == "arrival" and q.counts[0, 0] == 1 and q.total_jobs == 1
    assert rec.holding_time > 0 and q.clock == rec.clock


def test_step_departure_probability_single_busy_slow_server():
    cfg = proportioned_config(10)
    c = np.zeros((2, 4), dtype=np.int64)
    c[1, 0] = 1
    q = OccupancyState(c)
    rng = np.random.default_rng(3)
    trials = 20_000
    deps = sum(step(q, cfg, SA_JSQ_KIND, rng)[1].kind == "departure" for _ in range(trials))
    p = cfg.speeds[1] / (cfg.arrival_rate + cfg.speeds[1])
    assert stats.binomtest(deps, trials, p).pvalue > 1e-4


@given(st.lists(st.integers(0, 3), min_size=10, max_size=10), st.integers(0, 1000))
def test_step_never_picks_a_zero_rate_class(lengths, seed):
    cfg = proportioned_config(10)
    q = OccupancyState.from_queue_lengths(cfg, [lengths[:2], lengths[2:]])
    rng = np.random.default_rng(seed)
    for _ in range(20):
        q2, rec = step(q, cfg, JSQ_KIND, rng)
        q2.check(cfg)
        if rec.kind == "departure":
            exact = q.counts[rec.pool, rec.level - 1] - (q.counts[rec.pool, rec.level]
                                                         if rec.level < q.counts.shape[1] else 0)
            assert exact > 0
            assert q2.total_jobs == q.total_jobs - 1
        else:
            assert q2.total_jobs == q.total_jobs + 1
        q = q2


def test_transient_zero_horizon_and_determinism():
    cfg = proportioned_config(40)
    q0 = OccupancyState.from_queue_lengths(cfg, [[1] * 8, [2] * 10 + [0] * 22])
    tr = simulate_transient(cfg, SA_JSQ_KIND, q0, 0.0, [0.0], seed=1)
    assert np.array_equal(tr.counts[0, :, :4], q0.counts)
    a = simulate_transient(cfg, pod(2), q0, 5.0, np.linspace(0, 5, 51), seed=9)
    b = simulate_transient(cfg, pod(2), q0, 5.0, np.linspace(0, 5, 51), seed=9)
    assert np.array_equal(a.y, b.y) and a.event_sup_idle_fast == b.event_sup_idle_fast
    assert a.sup_idle_fast <= a.event_sup_idle_fast + 1e-12
    assert a.sup_idle_fast == pytest.approx(np.abs(a.idle_fast[a.sample_times >= 0]).max())
    with pytest.raises(ValueError):
        simulate_transient(cfg, pod(2), q0, 5.0, [1.0, 0.5], seed=9)


@pytest.mark.parametrize("kind", ALL_KINDS, ids=str)
def test_job_ledger_and_monotone_tails(kind):
    cfg = proportioned_config(30)
    sim = Simulator(cfg, kind, seed=4)
    grid = np.linspace(0.1, 50, 300)
    samples = sim.advance(50.0, grid)
    assert sim.counts.sum() == sim.arrivals - sim.departures
    assert (np.diff(samples, axis=2) <= 0).all()
    assert (samples[:, :, 0] <= np.asarray(cfg.pool_sizes)).all()


def test_tail_grows_on_demand():
    cfg = validate_config(SystemConfig(2, (1, 1), (1.5, 0.5), 0.1, lam=0.95))
    q0 = OccupancyState.from_queue_lengths(cfg, [[12], [9]])
    sim = Simulator(cfg, SA_JSQ_KIND, seed=0, q0=q0)
    assert sim.counts.shape[1] > 12
    sim.advance(30.0)
    assert sim.counts.sum() == q0.total_jobs + sim.arrivals - sim.departures
    assert not sim.counts[:, -1].any()


def test_single_pool_sa_jsq_equals_jsq():
    cfg = validate_config(SystemConfig(20, (20,), (1.0,), 1.0))
    grid = np.linspace(0, 30, 301)
    a = simulate_transient(cfg, SA_JSQ_KIND, None, 30.0, grid, seed=5)
    b = simulate_transient(cfg, JSQ_KIND, None, 30.0, grid, seed=5)
    assert np.array_equal(a.counts, b.counts)


@pytest.mark.parametrize("stops", [[7.0], [1.0, 2.5, 7.0], list(np.linspace(0.5, 7.0, 14))])
def test_result_independent_of_stop_times(stops):
    cfg = proportioned_config(25)
    ref = Simulator(cfg, pod(3), seed=2)
    ref.advance(7.0)
    sim = Simulator(cfg, pod(3), seed=2)
    for t in stops:
        sim.advance(t)
    assert np.array_equal(sim.counts, ref.counts)
    assert np.allclose(sim.area, ref.area, rtol=1e-12)


@needs_compiled
@pytest.mark.parametrize("kind", ALL_KINDS, ids=str)
def test_backends_bit_identical(kind):
    cfg = proportioned_config(50)
    grid = np.linspace(0, 20, 41)
    res = {}
    for be in ("compiled", "python"):
        sim = Simulator(cfg, kind, seed=13, backend=be)
        sim.track_idle_from(2.0)
        s = sim.advance(20.0, grid)
        res[be] = (sim.counts.copy(), sim.area.copy(), sim.ind.copy(), sim.clk.copy(),
                   sim.stats.copy(), s)
    for a, b in zip(res["compiled"], res["python"]):
        assert np.array_equal(a, b)


def test_max_events_pauses_exactly():
    cfg = proportioned_config(30)
    sim = Simulator(cfg, SA_JSQ_KIND, seed=1)
    sim.advance(100.0, max_events=250)
    assert sim.events == 250 and sim.time < 100.0


# ----------------------------------------------------------------------------
# exact oracle

def test_exact_single_server_matches_mm1k():
    rho, K = 0.7, 6
    cfg = validate_config(SystemConfig(1, (1,), (1.0,), 0.3, lam=rho))
    ex = exact_stationary_small(cfg, SA_JSQ_KIND, K)
    lengths = ex.states[:, 0, :].sum(axis=1)
    p = np.zeros(K + 1)
    np.add.at(p, lengths, ex.probs)
    np.testing.assert_allclose(p, mm1k(rho, K), atol=1e-13)
    assert ex.blocked_prob == pytest.approx(mm1k(rho, K)[-1], abs=1e-13)


def test_exact_two_server_jsq_hand_balance():
    lam, mu = 0.8, 1.0
    cfg = validate_config(SystemConfig(2, (2,), (mu,), 0.1, lam=lam / 2))
    ex = exact_stationary_small(cfg, JSQ_KIND, 1)
    busy = ex.states[:, 0, 0]
    p = np.zeros(3)
    np.add.at(p, busy, ex.probs)
    hand = np.array([1.0, lam / mu, lam ** 2 / (2 * mu ** 2)])
    np.testing.assert_allclose(p, hand / hand.sum(), atol=1e-13)


@pytest.mark.parametrize("kind", ALL_KINDS, ids=str)
def test_exact_normalized_and_rate_conservation(kind):
    cfg = validate_config(SystemConfig(3, (1, 2), (2.0, 0.5), 0.5))
    ex = exact_stationary_small(cfg, kind, 4)
    assert abs(ex.probs.sum() - 1) < 1e-12 and (ex.probs >= 0).all()
    rep = rate_conservation_check(ex.as_estimate(), cfg)
    assert abs(rep.residual) < 1e-10
    assert abs(rep.part2_residual) < 1e-10


def test_exact_too_large():
    with pytest.raises(StateSpaceTooLarge):
        exact_stationary_small(proportioned_config(40), SA_JSQ_KIND, 6)


def test_simulated_functionals_match_exact_small():
    cfg = validate_config(SystemConfig(3, (1, 2), (2.0, 0.5), 0.5, lam=0.5))
    ex = exact_stationary_small(cfg, SA_JSQ_KIND, 8).functionals()
    est = simulate_stationary(cfg, SA_JSQ_KIND, duration=20_000.0, seed=3)
    for name in functional_names(cfg):
        m, se = est.row(name)
        assert abs(m - ex[name]) <= 3 * se + 1e-4, name


def test_stationary_requires_batches_and_scales_to_empty():
    cfg = proportioned_config(20)
    with pytest.raises(InsufficientBatches):
        simulate_stationary(cfg, SA_JSQ_KIND, duration=10.0, n_batches=5)
    low = validate_config(SystemConfig(20, cfg.pool_sizes, cfg.speeds, cfg.beta, lam=0.01))
    est = simulate_stationary(low, SA_JSQ_KIND, duration=20_000.0, seed=0)
    jobs = est.means["y_plus1"] * low.sqrt_n + low.n
    assert jobs < 0.15
    assert est.means["y_plus2"] < 1e-3
    rep = rate_conservation_check(est, low)
    assert rep.target == pytest.approx(low.arrival_rate) and rep.part2_lhs < 1e-3


def test_rate_conservation_simulated():
    cfg = proportioned_config(50)
    est = simulate_stationary(cfg, SA_JSQ_KIND, duration=2000.0, seed=1)
    rep = rate_conservation_check(est, cfg)
    assert rep.within_3se and rep.relative < 0.01
    assert abs(rep.part2_residual) <= 4 * rep.part2_se
