"""Routing policies.

Policies act on tail counts. Servers of one pool with equal queue length are
exchangeable, so a decision is just ``(pool, level)``: the job joins some
pool-``pool`` server that currently holds exactly ``level`` jobs.

Randomized policies consume a fixed number of uniforms per arrival (see
:func:`draws_per_arrival`) so that the compiled and the pure-Python engines
stay in lockstep.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import _pykernels
from .model import OccupancyState, SystemConfig

SA_JSQ, JSQ, POD, JIQ = 0, 1, 2, 3
_NAMES = {SA_JSQ: "sa-jsq", JSQ: "jsq", POD: "pod", JIQ: "jiq"}
MAX_POD_SAMPLE = 64


@dataclass(frozen=True)
class PolicyKind:
    """Policy tag; `d` is the sample size for power-of-d."""

    code: int
    d: int = 0

    def __post_init__(self):
        if self.code not in _NAMES:
            raise ValueError(f"unknown policy code {self.code}")
        if self.code == POD and not 2 <= self.d <= MAX_POD_SAMPLE:
            raise ValueError(f"power-of-d needs 2 <= d <= {MAX_POD_SAMPLE}, got {self.d}")

    @property
    def name(self) -> str:
        return f"pod:{self.d}" if self.code == POD else _NAMES[self.code]

    def __str__(self) -> str:
        return self.name


SA_JSQ_KIND = PolicyKind(SA_JSQ)
JSQ_KIND = PolicyKind(JSQ)
JIQ_KIND = PolicyKind(JIQ)


def pod(d: int) -> PolicyKind:
    return PolicyKind(POD, d)


def parse_policy(text: str) -> PolicyKind:
    """Parse ``sa-jsq``, ``jsq``, ``jiq`` or ``pod:<d>``."""
    t = text.strip().lower()
    if t.startswith("pod"):
        _, _, d = t.partition(":")
        return pod(int(d) if d else 2)
    for code, name in _NAMES.items():
        if t == name and code != POD:
            return PolicyKind(code)
    raise ValueError(f"unknown policy {text!r}")


@dataclass(frozen=True)
class RoutingDecision:
    pool: int
    target_level: int


def draws_per_arrival(kind: PolicyKind) -> int:
    if kind.code == SA_JSQ:
        return 0
    if kind.code == POD:
        return kind.d + 1
    return 1


def select(kind: PolicyKind, q: OccupancyState, cfg: SystemConfig,
           rng: np.random.Generator | None = None) -> RoutingDecision:
    """Route one arrival.

    SA-JSQ joins a shortest queue, preferring the fastest pool. JSQ joins a
    shortest queue chosen uniformly among all servers at the minimum length.
    POD(d) samples d distinct servers uniformly and joins the shortest,
    breaking ties uniformly. JIQ joins a uniformly chosen idle server, or a
    uniformly chosen server when none is idle.

    The state must not use its deepest tracked level (callers grow the
    counts before that happens).
    """
    k = draws_per_arrival(kind)
    if k and rng is None:
        raise ValueError(f"{kind} needs a random generator")
    u = rng.random(k) if k else np.empty(0)
    counts = [list(map(int, row)) for row in q.counts]
    pool, level = _pykernels.route(counts, list(cfg.pool_sizes), cfg.n, kind.code, kind.d, u, 0)
    return RoutingDecision(pool, level)


def _server_lengths(q: OccupancyState, cfg: SystemConfig) -> list[tuple[int, int]]:
    """One ``(pool, length)`` pair per server."""
    lengths = q.queue_lengths()
    out = []
    for j, row in enumerate(lengths):
        out += [(j, ell) for ell in row]
        out += [(j, 0)] * (cfg.pool_sizes[j] - len(row))
    return out


def enumerate_decisions(kind: PolicyKind, q: OccupancyState, cfg: SystemConfig) -> dict[RoutingDecision, Fraction]:
    """Exact decision distribution, by brute force over individual servers.

    Probabilities are exact fractions. Intended for small states only (POD
    enumerates all ``C(n, d)`` sample sets).
    """
    servers = _server_lengths(q, cfg)
    n = len(servers)
    dist: dict[RoutingDecision, Fraction] = {}

    def add(pool, level, p):
        key = RoutingDecision(pool, level)
        dist[key] = dist.get(key, Fraction(0)) + p

    if kind.code in (SA_JSQ, JSQ):
        best = min(ell for _, ell in servers)
        at_min = [(j, ell) for j, ell in servers if ell == best]
        if kind.code == SA_JSQ:
            add(min(j for j, _ in at_min), best, Fraction(1))
        else:
            for j, ell in at_min:
                add(j, ell, Fraction(1, len(at_min)))
    elif kind.code == JIQ:
        idle = [(j, ell) for j, ell in servers if ell == 0]
        pick = idle or servers
        for j, ell in pick:
            add(j, ell, Fraction(1, len(pick)))
    else:
        sets = list(itertools.combinations(range(n), kind.d))
        for s in sets:
            best = min(servers[k][1] for k in s)
            winners = [servers[k] for k in s if servers[k][1] == best]
            for j, ell in winners:
                add(j, ell, Fraction(1, len(sets) * len(winners)))
    return dist
