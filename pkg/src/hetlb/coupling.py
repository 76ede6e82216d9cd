"""Buffer-two comparison system and its pathwise coupling with the original.

The comparison system keeps only two numbers: ``q1`` (queues holding at
least one job) and ``q2`` (queues holding two). Busy queues are always
packed onto the fastest servers, so the departure rate from ``k`` occupied
positions is :func:`tilde_mu`. An arrival starts service if some queue is
empty, otherwise waits in a second slot, otherwise it is rejected.

The coupling drives both systems from one arrival clock and one
potential-departure clock of rate ``sum_j mu_j N_j`` carrying a uniform mark
per epoch. Under it the comparison system never holds more waiting jobs,
nor more jobs in total, than the original.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import _backend, rng as _rng
from ._pykernels import DONE, LOG_FULL, OVERFLOW, REFILL, VIOLATION
from .ctmc_sim import StationaryEstimate
from .errors import CouplingViolation, InsufficientBatches
from .model import INITIAL_DEPTH, OccupancyState, SystemConfig
from .policy import POD, PolicyKind
from .stats import mean_se

EVENT_NAMES = ("arrival", "potential_departure")
LOG_COLUMNS = ("t", "U_l", "event_kind", "Q1", "Qp2", "q1t", "q2t")


def tilde_mu(count: int, cfg: SystemConfig) -> float:
    """Total service rate when `count` busy servers are packed fastest-first."""
    if not 0 <= count <= cfg.n:
        raise ValueError(f"count must lie in [0, {cfg.n}], got {count}")
    rate = 0.0
    left = count
    for size, mu in zip(cfg.pool_sizes, cfg.speeds):
        take = min(left, size)
        rate += mu * take
        left -= take
        if left == 0:
            break
    return rate


@dataclass
class ModifiedState:
    """State and event counters of the comparison system.

    ``A`` counts arrivals, ``A1`` arrivals that waited in the second slot,
    ``AR`` rejections, ``D1`` all departures and ``D2`` departures from
    queues holding two jobs.
    """

    q1_tilde: int
    q2_tilde: int
    clock: float = 0.0
    A: int = 0
    A1: int = 0
    AR: int = 0
    D1: int = 0
    D2: int = 0

    def check(self, n: int) -> None:
        if not 0 <= self.q2_tilde <= self.q1_tilde <= n:
            raise ValueError(f"need 0 <= q2 <= q1 <= {n}, got ({self.q1_tilde}, {self.q2_tilde})")

    def balance(self, q1_0: int, q2_0: int) -> tuple[int, int]:
        """``(q1, q2)`` rebuilt from the initial values and the counters."""
        q1 = q1_0 + self.A - self.AR - self.A1 - self.D1 + self.D2
        q2 = q2_0 + self.A1 - self.D2
        return q1, q2

    def balance_holds(self, q1_0: int, q2_0: int) -> bool:
        return self.balance(q1_0, q2_0) == (self.q1_tilde, self.q2_tilde)


def _counters(state: ModifiedState) -> np.ndarray:
    return np.array([state.A, state.A1, state.AR, state.D1, state.D2], dtype=np.int64)


@dataclass
class CoupledTrace:
    """Event log of a coupled run.

    ``totals[k]`` holds ``(Q1, Qp2, q1, q2)`` right after event k, where
    ``Q1`` counts busy servers and ``Qp2`` waiting jobs in the original
    system. ``uniforms`` is NaN for arrivals.
    """

    times: np.ndarray
    uniforms: np.ndarray
    kinds: np.ndarray
    totals: np.ndarray
    initial: tuple[int, int]
    modified: ModifiedState
    final: OccupancyState
    potential_departures: int
    original_departures: int
    kind: str = ""
    seed: int = 0

    @property
    def violations(self) -> np.ndarray:
        Q1, Qp2, q1, q2 = self.totals.T
        return (q2 > Qp2) | (q1 + q2 > Q1 + Qp2)

    @property
    def lost_departures(self) -> int:
        """Potential departures that moved nothing in the original system."""
        return self.potential_departures - self.original_departures

    def balance_holds(self) -> bool:
        return self.modified.balance_holds(*self.initial)

    def rows(self):
        for t, u, k, (Q1, Qp2, q1, q2) in zip(self.times, self.uniforms, self.kinds, self.totals):
            yield (float(t), float(u), EVENT_NAMES[int(k)], int(Q1), int(Qp2), int(q1), int(q2))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            w.writerows(self.rows())


def coupled_run(cfg: SystemConfig, kind: PolicyKind, horizon: float, seed: int,
                q0: OccupancyState | None = None, replication: int = 0, log: bool = True,
                backend: str = "auto", streams=None) -> CoupledTrace:
    """Run the original system and the comparison system on shared randomness.

    Parameters
    ----------
    cfg, kind : system and routing policy of the original system
    horizon : float
    seed, replication : int
        Select the random streams. Arrival uniforms are the same as for
        :class:`hetlb.ctmc_sim.Simulator` with the same seed.
    q0 : OccupancyState, optional
        Initial occupancy with every queue holding at most two jobs; the
        comparison system starts from the matching totals.
    log : bool
        Keep the per-event log (otherwise only the final states).
    streams : UniformBlocks-like, optional
        Explicit uniforms ``bufs = (arrivals, service, policy)``; used to
        replay hand-written scenarios.

    Raises
    ------
    CouplingViolation
        If an event breaks either pathwise inequality.
    ValueError
        If `q0` has a queue longer than two.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    if kind.code == POD and kind.d > cfg.n:
        raise ValueError(f"cannot sample {kind.d} of {cfg.n} servers")
    q0 = OccupancyState.empty(cfg) if q0 is None else q0
    q0.check(cfg)
    c = np.array(q0.counts, dtype=np.int64)
    if c.shape[1] > 2 and c[:, 2:].any():
        raise ValueError("coupled runs need every initial queue to hold at most two jobs")
    c = np.ascontiguousarray(np.pad(c, ((0, 0), (0, max(0, INITIAL_DEPTH - c.shape[1])))))
    K = _backend.get(backend)
    if streams is None:
        gens = _rng.generators(seed, replication)
        streams = _rng.UniformBlocks([gens[k] for k in _rng.STREAM_NAMES])
    N = np.asarray(cfg.pool_sizes, dtype=np.int64)
    mu = np.asarray(cfg.speeds, dtype=float)
    R = float(mu @ N)
    Q1_0, Qp2_0 = int(c[:, 0].sum()), int(c[:, 1].sum())
    mod = np.array([Q1_0, Qp2_0], dtype=np.int64)
    counters = np.zeros(5, dtype=np.int64)
    clk = np.array([q0.clock, -1.0, -1.0])
    stats = np.zeros(4, dtype=np.int64)
    lpos = np.zeros(1, dtype=np.int64)
    cap = 4096 if log else 0
    log_t, log_u = np.zeros(cap), np.zeros(cap)
    log_kind, log_q = np.zeros(cap, dtype=np.int64), np.zeros((cap, 4), dtype=np.int64)
    scratch = np.zeros(max(kind.d, 1) + 1, dtype=np.int64)
    t_stop = q0.clock + horizon
    while True:
        status = K.coupled_advance(c, N, mu, cfg.arrival_rate, R, kind.code, kind.d,
                                   streams.bufs[0], streams.bufs[1], streams.bufs[2], streams.pos,
                                   clk, float(t_stop), mod, counters, log_t, log_u, log_kind,
                                   log_q, lpos, stats, scratch)
        if status == DONE:
            break
        if status == REFILL:
            streams.refill()
        elif status == OVERFLOW:
            c = np.ascontiguousarray(np.pad(c, ((0, 0), (0, c.shape[1]))))
        elif status == LOG_FULL:
            cap *= 2
            log_t = np.resize(log_t, cap)
            log_u = np.resize(log_u, cap)
            log_kind = np.resize(log_kind, cap)
            log_q = np.ascontiguousarray(np.resize(log_q, (cap, 4)))
        elif status == VIOLATION:
            raise CouplingViolation(
                f"{kind.name} seed {seed}: at t={clk[0]:.6g} comparison system "
                f"(q1, q2) = ({mod[0]}, {mod[1]}) exceeds original (Q1, Qp2) = "
                f"({int(c[:, 0].sum())}, {int(c[:, 1:].sum())})")
        else:
            raise RuntimeError(f"unexpected kernel status {status}")
    k = int(lpos[0])
    state = ModifiedState(int(mod[0]), int(mod[1]), float(clk[0]), *map(int, counters))
    return CoupledTrace(log_t[:k].copy(), log_u[:k].copy(), log_kind[:k].copy(), log_q[:k].copy(),
                        (Q1_0, Qp2_0), state, OccupancyState(c, float(clk[0])),
                        int(stats[1]), int(stats[2]), kind.name, seed)


# ----------------------------------------------------------------------------
# stationary behaviour of the comparison system

MODIFIED_NAMES = ["y1", "y2", "y_plus1", "y_plus2", "mean_q1", "blocking"]


def _modified_functionals(area: np.ndarray, T: float, A: int, AR: int, cfg: SystemConfig) -> np.ndarray:
    m1, m2 = area[0] / T, area[1] / T
    rn = cfg.sqrt_n
    block = AR / A if A else 0.0
    return np.array([(m1 - cfg.n) / rn, m2 / rn, (m1 + m2 - cfg.n) / rn, m2 / rn, m1, block])


def simulate_modified_stationary(cfg: SystemConfig, warmup: float | None = None,
                                 duration: float = 1000.0, n_batches: int = 20, seed: int = 0,
                                 replication: int = 0, q0: ModifiedState | None = None,
                                 backend: str = "auto") -> StationaryEstimate:
    """Batch-means estimates for the comparison system.

    Reported functionals: ``y1 = (q1 - n)/sqrt(n)``, ``y2 = q2/sqrt(n)``,
    ``y_plus1 = (q1 + q2 - n)/sqrt(n)`` (comparable with the original
    system's ``y_plus1``), ``y_plus2 = y2``, ``mean_q1`` and the fraction of
    rejected arrivals. The arrival stream is the one the original-system
    simulator uses for the same seed and replication.

    Raises
    ------
    InsufficientBatches
        If fewer than 10 batches are requested or a batch saw no events.
    """
    if n_batches < 10:
        raise InsufficientBatches(f"need at least 10 batches, got {n_batches}")
    if warmup is None:
        warmup = duration / 4
    state = ModifiedState(0, 0) if q0 is None else q0
    state.check(cfg.n)
    K = _backend.get(backend)
    gens = _rng.generators(seed, replication)
    blocks = _rng.UniformBlocks([gens["arrivals"], gens["service"]])
    N = np.asarray(cfg.pool_sizes, dtype=np.int64)
    mu = np.asarray(cfg.speeds, dtype=float)
    mod = np.array([state.q1_tilde, state.q2_tilde], dtype=np.int64)
    counters = _counters(state)
    clk = np.array([state.clock, -1.0, -1.0])
    area = np.zeros(2)
    stats = np.zeros(1, dtype=np.int64)

    def run(t_stop):
        while K.modified_advance(N, mu, cfg.arrival_rate, blocks.bufs[0], blocks.bufs[1],
                                 blocks.pos, clk, float(t_stop), mod, counters, area,
                                 stats) == REFILL:
            blocks.refill()

    t0 = state.clock
    run(t0 + warmup)
    width = duration / n_batches
    rows = []
    for k in range(n_batches):
        a0, c0, ev0 = area.copy(), counters.copy(), int(stats[0])
        run(t0 + warmup + (k + 1) * width)
        if int(stats[0]) == ev0:
            raise InsufficientBatches(f"batch {k} contained no events")
        dc = counters - c0
        rows.append(_modified_functionals(area - a0, width, int(dc[0]), int(dc[2]), cfg))
    values = np.array(rows)
    mean, se = mean_se(values)
    blocking = counters[2] / counters[0] if counters[0] else 0.0
    return StationaryEstimate(MODIFIED_NAMES, dict(zip(MODIFIED_NAMES, map(float, mean))),
                              dict(zip(MODIFIED_NAMES, map(float, se))), n_batches, warmup,
                              duration, cfg.arrival_rate, float(blocking), "modified", values,
                              None, int(stats[0]), int(counters[0]))


@dataclass
class ModifiedExact:
    """Stationary law of the comparison system on all states ``q2 <= q1 <= n``."""

    cfg: SystemConfig
    states: np.ndarray  # (S, 2)
    probs: np.ndarray
    blocking: float = field(default=0.0)

    def functionals(self) -> dict[str, float]:
        q1 = self.probs @ self.states[:, 0]
        q2 = self.probs @ self.states[:, 1]
        rn, n = self.cfg.sqrt_n, self.cfg.n
        vals = [(q1 - n) / rn, q2 / rn, (q1 + q2 - n) / rn, q2 / rn, q1, self.blocking]
        return dict(zip(MODIFIED_NAMES, map(float, vals)))


def modified_exact_stationary(cfg: SystemConfig) -> ModifiedExact:
    """Solve the global balance equations of the comparison system exactly.

    The chain is finite, so no truncation is involved; meant for small n.
    """
    n = cfg.n
    states = [(a, b) for a in range(n + 1) for b in range(a + 1)]
    index = {s: k for k, s in enumerate(states)}
    S = len(states)
    Q = np.zeros((S, S))
    lam = cfg.arrival_rate
    for k, (a, b) in enumerate(states):
        if a < n:
            Q[k, index[(a + 1, b)]] += lam
        elif b < n:
            Q[k, index[(a, b + 1)]] += lam
        r1, r2 = tilde_mu(a, cfg), tilde_mu(b, cfg)
        if b > 0:
            Q[k, index[(a, b - 1)]] += r2
        if r1 > r2:
            Q[k, index[(a - 1, b)]] += r1 - r2
    np.fill_diagonal(Q, -Q.sum(axis=1))
    pi = sla.null_space(Q.T)[:, 0]
    pi = np.abs(pi) / np.abs(pi).sum()
    full = index[(n, n)]
    return ModifiedExact(cfg, np.array(states, dtype=np.int64), pi, float(pi[full]))
