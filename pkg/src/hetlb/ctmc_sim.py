"""Event-driven simulation of the occupancy CTMC and an exact small-chain oracle.

The hot loop lives in the kernel module picked by :mod:`hetlb._backend`;
this module handles buffers, tail growth, batching and reporting.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _backend, rng as _rng
from ._pykernels import DONE, OVERFLOW, PAUSED, REFILL
from .errors import InsufficientBatches, StateSpaceTooLarge
from .model import INITIAL_DEPTH, OccupancyState, ScaledState, SystemConfig, scale_state
from .policy import POD, PolicyKind, RoutingDecision, enumerate_decisions, select
from .stats import mean_se

MAX_EXACT_STATES = 200_000


def functional_names(cfg: SystemConfig) -> list[str]:
    """Names of the stationary functionals, in reporting order."""
    return ([f"abs_y{j + 1}_1" for j in range(cfg.M)]
            + ["y1_2", "y_plus1", "y_plus2", "busy_rate", "wait_prob", "part2_rate",
               "saturation_prob"])


def functionals_from_integrals(area: np.ndarray, ind, T: float, cfg: SystemConfig) -> np.ndarray:
    """Time averages of the tracked functionals over a window of length `T`.

    ``area[j, i]`` is the time integral of ``counts[j, i]``; ``ind`` holds the
    integrals of the all-busy indicator and of the all-busy-with-fast-pool-
    doubled indicator.
    """
    rn = cfg.sqrt_n
    N = np.asarray(cfg.pool_sizes, dtype=float)
    mu = np.asarray(cfg.speeds, dtype=float)
    a = np.asarray(area, dtype=float) / T
    out = list((N - a[:, 0]) / rn)
    out.append(a[0, 1] / rn)
    out.append((a.sum() - cfg.n) / rn)
    out.append(a[:, 1:].sum() / rn)
    out.append(float(mu @ a[:, 0]))
    out.append(ind[0] / T)
    out.append(float(mu[1:] @ a[1:, 1]) + mu[0] * a[0, 2])
    out.append(ind[1] / T)
    return np.array(out)


def functionals_of_state(counts: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """The same functionals evaluated at a single state."""
    c = np.asarray(counts)
    c = np.pad(c, ((0, 0), (0, max(0, 3 - c.shape[1]))))
    busy = c[:, 0].sum() == cfg.n
    ind = (float(busy), float(busy and c[0, 1] == cfg.pool_sizes[0]))
    return functionals_from_integrals(c.astype(float), ind, 1.0, cfg)


@dataclass(frozen=True)
class EventRecord:
    kind: str  # "arrival" or "departure"
    pool: int
    level: int  # queue length of the affected server before the event
    holding_time: float
    clock: float


def _ensure_headroom(c: np.ndarray) -> np.ndarray:
    """Double the tracked depth while the deepest level is in use."""
    while c[:, -1].any():
        c = np.pad(c, ((0, 0), (0, c.shape[1])))
    return c


def step(q: OccupancyState, cfg: SystemConfig, kind: PolicyKind,
         rng: np.random.Generator) -> tuple[OccupancyState, EventRecord]:
    """One transition of the CTMC by the direct method.

    Draws an exponential holding time with the total event rate, then picks
    the arrival with probability proportional to ``n * lam`` or a departure
    class ``(j, i)`` with probability proportional to
    ``mu_j * (Q_{j,i} - Q_{j,i+1})``.
    """
    c = _ensure_headroom(np.array(q.counts, dtype=np.int64))
    mu = np.asarray(cfg.speeds)
    nxt = np.pad(c[:, 1:], ((0, 0), (0, 1)))
    class_rates = mu[:, None] * (c - nxt)
    total = cfg.arrival_rate + class_rates.sum()
    hold = rng.exponential(1.0 / total)
    clock = q.clock + hold
    u = rng.random() * total
    if u < cfg.arrival_rate:
        dec = select(kind, OccupancyState(c, q.clock), cfg, rng)
        c[dec.pool, dec.target_level] += 1
        rec = EventRecord("arrival", dec.pool, dec.target_level, hold, clock)
    else:
        flat = np.cumsum(class_rates.ravel())
        k = min(int(np.searchsorted(flat, u - cfg.arrival_rate, side="right")), flat.size - 1)
        while class_rates.ravel()[k] == 0:
            k -= 1
        j, i = divmod(k, c.shape[1])
        c[j, i] -= 1
        rec = EventRecord("departure", j, i + 1, hold, clock)
    c = _ensure_headroom(c)
    return OccupancyState(c, clock), rec


class Simulator:
    """One replication of the CTMC with its own random streams.

    Parameters
    ----------
    cfg : SystemConfig
    kind : PolicyKind
    seed, replication : int
        Select the random sub-streams (arrivals, service, policy).
    q0 : OccupancyState, optional
        Initial occupancy, empty by default.
    backend : {"auto", "compiled", "python"}
    """

    def __init__(self, cfg: SystemConfig, kind: PolicyKind, seed: int, replication: int = 0,
                 q0: OccupancyState | None = None, backend: str = "auto", block: int = _rng.BLOCK):
        if kind.code == POD and kind.d > cfg.n:
            raise ValueError(f"cannot sample {kind.d} of {cfg.n} servers")
        self.cfg = cfg
        self.kind = kind
        self.seed = seed
        self.replication = replication
        self.K = _backend.get(backend)
        gens = _rng.generators(seed, replication)
        self.blocks = _rng.UniformBlocks([gens[k] for k in _rng.STREAM_NAMES], block)
        if q0 is None:
            q0 = OccupancyState.empty(cfg)
        q0.check(cfg)
        c = np.array(q0.counts, dtype=np.int64)
        if c.shape[1] < INITIAL_DEPTH:
            c = np.pad(c, ((0, 0), (0, INITIAL_DEPTH - c.shape[1])))
        self.counts = np.ascontiguousarray(_ensure_headroom(c))
        self.initial_jobs = int(self.counts.sum())
        self.N = np.asarray(cfg.pool_sizes, dtype=np.int64)
        self.mu = np.asarray(cfg.speeds, dtype=float)
        # time, next arrival, pending departure, sup-tracking start, running max idle
        self.clk = np.array([q0.clock, -1.0, -1.0, math.inf, 0.0])
        self.area = np.zeros(self.counts.shape)
        self.ind = np.zeros(2)
        self.stats = np.zeros(3, dtype=np.int64)  # arrivals, departures, events
        self.scratch = np.zeros(max(kind.d, 1) + 1, dtype=np.int64)

    @property
    def time(self) -> float:
        return float(self.clk[0])

    @property
    def arrivals(self) -> int:
        return int(self.stats[0])

    @property
    def departures(self) -> int:
        return int(self.stats[1])

    @property
    def events(self) -> int:
        return int(self.stats[2])

    def state(self) -> OccupancyState:
        return OccupancyState(self.counts, self.time)

    def track_idle_from(self, t: float) -> None:
        """Start tracking the running maximum of idle servers outside the slowest pool."""
        self.clk[3] = t
        self.clk[4] = 0.0

    @property
    def max_idle_fast(self) -> int:
        return int(self.clk[4])

    def _grow(self):
        L = self.counts.shape[1]
        self.counts = np.ascontiguousarray(np.pad(self.counts, ((0, 0), (0, L))))
        self.area = np.ascontiguousarray(np.pad(self.area, ((0, 0), (0, L))))

    def advance(self, t_stop: float, grid=None, max_events: int | None = None) -> np.ndarray | None:
        """Run until `t_stop` (or until `max_events` total events).

        When `grid` is given, returns the counts held at each grid time as an
        array of shape ``(len(grid), M, L)``.
        """
        cfg, K, b = self.cfg, self.K, self.blocks
        g = np.ascontiguousarray(np.zeros(0) if grid is None else np.asarray(grid, dtype=float))
        samples = np.zeros((len(g), cfg.M, self.counts.shape[1]), dtype=np.int64)
        gpos = np.zeros(1, dtype=np.int64)
        cap = np.iinfo(np.int64).max if max_events is None else int(max_events)
        while True:
            status = K.ctmc_advance(self.counts, self.N, self.mu, cfg.arrival_rate,
                                    self.kind.code, self.kind.d, b.bufs[0], b.bufs[1], b.bufs[2],
                                    b.pos, self.clk, float(t_stop), cap, g, gpos, samples,
                                    self.area, self.ind, self.stats, self.scratch)
            if status in (DONE, PAUSED):
                break
            if status == REFILL:
                b.refill()
            elif status == OVERFLOW:
                self._grow()
                L = self.counts.shape[1]
                samples = np.ascontiguousarray(
                    np.pad(samples, ((0, 0), (0, 0), (0, L - samples.shape[2]))))
            else:
                raise RuntimeError(f"unexpected kernel status {status}")
        return samples if grid is not None else None

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        return self.area.copy(), self.ind.copy()


@dataclass
class Trajectory:
    """Scaled occupancy sampled on a time grid.

    ``y[k]`` is the scaled matrix at ``sample_times[k]``. ``sup_idle_fast`` is
    the largest ``|idle_fast|`` over the samples; ``event_sup_idle_fast`` is
    the exact supremum over ``[sup_from, horizon]`` tracked event by event.
    """

    sample_times: np.ndarray
    y: np.ndarray
    idle_fast: np.ndarray
    sup_idle_fast: float
    event_sup_idle_fast: float
    seed: int
    counts: np.ndarray = field(repr=False)

    def states(self, cfg: SystemConfig) -> list[ScaledState]:
        return [scale_state(OccupancyState(c, float(t)), cfg)
                for t, c in zip(self.sample_times, self.counts)]


def simulate_transient(cfg: SystemConfig, kind: PolicyKind, q0: OccupancyState | None,
                       horizon: float, grid, seed: int, replication: int = 0,
                       sup_from: float = 0.0, backend: str = "auto") -> Trajectory:
    """Simulate on ``[0, horizon]`` and record the state at each grid time.

    The state is right-continuous and held constant between events.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size and (grid[0] < 0 or grid[-1] > horizon or (np.diff(grid) <= 0).any()):
        raise ValueError("grid must be strictly increasing within [0, horizon]")
    sim = Simulator(cfg, kind, seed, replication, q0, backend)
    sim.track_idle_from(sup_from)
    counts = sim.advance(horizon, grid)
    y = counts.astype(float)
    y[:, :, 0] -= np.asarray(cfg.pool_sizes, dtype=float)
    y /= cfg.sqrt_n
    idle = y[:, :-1, 0].sum(axis=1)
    in_window = grid >= sup_from
    sup = float(np.abs(idle[in_window]).max()) if in_window.any() else 0.0
    # the running max includes the state at sup_from even without events
    event_sup = sim.max_idle_fast / cfg.sqrt_n if horizon >= sup_from else 0.0
    return Trajectory(grid, y, idle, sup, event_sup, seed, counts)


@dataclass
class StationaryEstimate:
    """Batch-means estimates of the tracked stationary functionals."""

    names: list[str]
    means: dict[str, float]
    ses: dict[str, float]
    n_batches: int
    warmup: float
    duration: float
    arrival_rate: float
    blocked_prob: float = 0.0
    policy: str = ""
    batch_values: np.ndarray | None = field(default=None, repr=False)
    samples: np.ndarray | None = field(default=None, repr=False)
    events: int = 0
    arrivals: int = 0

    def row(self, name: str) -> tuple[float, float]:
        return self.means[name], self.ses[name]


def simulate_stationary(cfg: SystemConfig, kind: PolicyKind, warmup: float | None = None,
                        duration: float = 1000.0, n_batches: int = 20, seed: int = 0,
                        replication: int = 0, q0: OccupancyState | None = None,
                        sample_dt: float | None = None, backend: str = "auto") -> StationaryEstimate:
    """Time-average estimates over ``[warmup, warmup + duration]``.

    Standard errors come from `n_batches` equal-length batches. When
    `sample_dt` is given, the scaled state is also sampled at that spacing
    inside the window and returned in ``samples`` with shape
    ``(k, M, L)``.

    Raises
    ------
    InsufficientBatches
        If fewer than 10 batches are requested or a batch saw no events.
    """
    if n_batches < 10:
        raise InsufficientBatches(f"need at least 10 batches, got {n_batches}")
    if warmup is None:
        warmup = duration / 4
    sim = Simulator(cfg, kind, seed, replication, q0, backend)
    sim.advance(warmup)
    names = functional_names(cfg)
    width = duration / n_batches
    rows = []
    chunks = []
    for k in range(n_batches):
        area0, ind0 = sim.snapshot()
        ev0 = sim.events
        t_end = warmup + (k + 1) * width
        grid = None
        if sample_dt:
            start = warmup + k * width
            grid = np.arange(start, t_end, sample_dt)
        counts = sim.advance(t_end, grid)
        if sim.events == ev0:
            raise InsufficientBatches(f"batch {k} contained no events")
        area = sim.area.copy()
        area[:, :area0.shape[1]] -= area0
        rows.append(functionals_from_integrals(area, sim.ind - ind0, width, cfg))
        if counts is not None:
            chunks.append(counts)
    values = np.array(rows)
    mean, se = mean_se(values)
    samples = None
    if chunks:
        L = max(ch.shape[2] for ch in chunks)
        counts = np.concatenate([np.pad(ch, ((0, 0), (0, 0), (0, L - ch.shape[2]))) for ch in chunks])
        samples = counts.astype(float)
        samples[:, :, 0] -= np.asarray(cfg.pool_sizes, dtype=float)
        samples /= cfg.sqrt_n
    return StationaryEstimate(names, dict(zip(names, map(float, mean))),
                              dict(zip(names, map(float, se))), n_batches,
                              warmup, duration, cfg.arrival_rate, 0.0, kind.name, values,
                              samples, sim.events, sim.arrivals)


# ----------------------------------------------------------------------------
# exact oracle


def _pool_profiles(size: int, cap: int) -> list[tuple[int, ...]]:
    """All non-increasing tail vectors (Q_1..Q_cap) for a pool of `size` servers."""
    out = []
    for lengths in itertools.combinations_with_replacement(range(cap + 1), size):
        out.append(tuple(sum(1 for q in lengths if q >= i) for i in range(1, cap + 1)))
    return out


def _raises_part2(pool: int, level: int) -> bool:
    # an arrival joining a fast server at >= 2 jobs or a slower one at >= 1
    return level >= 2 if pool == 0 else level >= 1


@dataclass
class ExactStationary:
    """Stationary law of the chain truncated at queue length `cap`."""

    cfg: SystemConfig
    kind: PolicyKind
    cap: int
    states: np.ndarray  # (S, M, cap) tail counts
    probs: np.ndarray
    blocked_prob: float  # fraction of arrivals lost to the truncation
    raise_prob: float  # fraction of arrivals accepted at a level counted by part 2

    def functionals(self) -> dict[str, float]:
        names = functional_names(self.cfg)
        vals = sum(p * functionals_of_state(s, self.cfg) for s, p in zip(self.states, self.probs))
        return dict(zip(names, map(float, vals)))

    def as_estimate(self) -> StationaryEstimate:
        names = functional_names(self.cfg)
        means = self.functionals()
        est = StationaryEstimate(names, means, {k: 0.0 for k in names}, 0, 0.0, math.inf,
                                 self.cfg.arrival_rate, self.blocked_prob, self.kind.name)
        est.means["raise_prob"] = self.raise_prob
        est.ses["raise_prob"] = 0.0
        return est


def exact_stationary_small(cfg: SystemConfig, kind: PolicyKind, cap: int) -> ExactStationary:
    """Solve the global balance equations of the truncated chain.

    Queue lengths are capped at `cap`; an arrival routed to a queue already
    holding `cap` jobs is lost.

    Raises
    ------
    StateSpaceTooLarge
        If the truncated chain has more than 200 000 states.
    """
    size = 1
    for k in cfg.pool_sizes:
        size *= math.comb(k + cap, cap)
    if size > MAX_EXACT_STATES:
        raise StateSpaceTooLarge(f"{size} states exceed the limit of {MAX_EXACT_STATES}")
    profiles = [_pool_profiles(k, cap) for k in cfg.pool_sizes]
    states = [tuple(p) for p in itertools.product(*profiles)]
    index = {s: k for k, s in enumerate(states)}
    mu = cfg.speeds
    rows, cols, vals = [], [], []
    arrivals_lost = np.zeros(len(states))
    arrivals_raise = np.zeros(len(states))
    lam = cfg.arrival_rate
    for k, s in enumerate(states):
        c = np.array(s, dtype=np.int64)
        q = OccupancyState(np.pad(c, ((0, 0), (0, 1))))
        for dec, p in enumerate_decisions(kind, q, cfg).items():
            p = float(p)
            if dec.target_level >= cap:
                arrivals_lost[k] += p
                continue
            if _raises_part2(dec.pool, dec.target_level):
                arrivals_raise[k] += p
            t = [list(r) for r in s]
            t[dec.pool][dec.target_level] += 1
            rows.append(k)
            cols.append(index[tuple(map(tuple, t))])
            vals.append(lam * p)
        for j in range(cfg.M):
            for i in range(cap):
                nxt = s[j][i + 1] if i + 1 < cap else 0
                rate = mu[j] * (s[j][i] - nxt)
                if rate > 0:
                    t = [list(r) for r in s]
                    t[j][i] -= 1
                    rows.append(k)
                    cols.append(index[tuple(map(tuple, t))])
                    vals.append(rate)
    S = len(states)
    Q = sp.coo_matrix((vals, (rows, cols)), shape=(S, S)).tocsr()
    Q = Q - sp.diags(np.asarray(Q.sum(axis=1)).ravel())
    A = Q.T.tolil()
    A[S - 1, :] = np.ones(S)
    rhs = np.zeros(S)
    rhs[-1] = 1.0
    pi = spla.spsolve(A.tocsc(), rhs)
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    return ExactStationary(cfg, kind, cap, np.array(states, dtype=np.int64), pi,
                           float(pi @ arrivals_lost), float(pi @ arrivals_raise))


@dataclass
class RateConservationReport:
    """Rate-conservation identities checked on a stationary estimate.

    Part 1: the busy service rate equals the accepted arrival rate.
    Part 2: departures that lower the count of jobs beyond the first in
    slower pools (and beyond the second in the fastest pool) balance the
    arrivals that raise it.
    """

    busy_rate: float
    busy_se: float
    target: float
    residual: float
    relative: float
    within_3se: bool
    part2_lhs: float
    part2_rhs: float
    part2_residual: float
    part2_se: float
    part2_within_3se: bool


def rate_conservation_check(est: StationaryEstimate, cfg: SystemConfig) -> RateConservationReport:
    """Compare the estimated busy service rate with the accepted arrival rate.

    For simulated estimates the arrival side of part 2 uses the event that
    every server is busy and the fastest pool is fully doubled, which is the
    exact raising event under SA-JSQ. Exact-oracle estimates carry the
    policy-specific probability instead (``raise_prob``).
    """
    accepted = est.arrival_rate * (1.0 - est.blocked_prob)
    busy, busy_se = est.row("busy_rate")
    resid = busy - accepted
    rel = abs(resid) / accepted
    lhs, lhs_se = est.row("part2_rate")
    if "raise_prob" in est.means:
        rhs = est.arrival_rate * est.means["raise_prob"]
        rhs_se = 0.0
    else:
        p, p_se = est.row("saturation_prob")
        rhs = est.arrival_rate * p
        rhs_se = est.arrival_rate * p_se
    # the two sides are positively correlated, so the independent-sum SE is conservative
    se2 = math.hypot(lhs_se, rhs_se)
    r2 = lhs - rhs
    return RateConservationReport(busy, busy_se, accepted, resid, rel,
                                  abs(resid) <= 3 * busy_se, lhs, rhs, r2, se2,
                                  abs(r2) <= 3 * se2)


__all__ = [
    "EventRecord", "ExactStationary", "RateConservationReport", "RoutingDecision", "Simulator",
    "StationaryEstimate", "Trajectory", "exact_stationary_small", "functional_names",
    "rate_conservation_check", "simulate_stationary", "simulate_transient", "step",
]
