"""Lyapunov function built from the fluid flow of the two-dimensional drift.

Coordinates are ``x1 = (total busy servers - n) / n <= 0`` and
``x2 = (fast-pool servers holding two or more jobs) / n >= 0``. The fluid
flow is

    v1' = -beta/sqrt(n) - muM v1 + mu1 v2,    v2' = -mu1 v2

until v1 reaches 0, after which v1 stays at 0 and v2 falls at rate
beta/sqrt(n) until ``v2 = beta / (mu1 sqrt(n))``.

``f_star(x)`` is the integral of ``(v2(s) - kappa/sqrt(n))^+`` along the flow
started at x. It solves ``L f = -(x2 - kappa/sqrt(n))^+`` where ``L`` is the
first-order operator of :func:`L_apply`. The plane splits into three
regions: Omega1 (``x2 <= kappa/sqrt(n)``), Omega3 (above the curve of
starting points whose flow meets ``x1 = 0`` exactly when ``v2`` has decayed
to ``kappa/sqrt(n)``) and Omega2 in between.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import OccupancyState, SystemConfig

OMEGA1, OMEGA2, OMEGA3 = 1, 2, 3
_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class LyapunovContext:
    """Parameters ``(n, beta, mu1, muM, kappa)``; requires ``kappa > beta / mu1``."""

    n: int
    beta: float
    mu1: float
    muM: float
    kappa: float

    def __post_init__(self):
        if self.n < 1 or self.beta <= 0 or self.muM <= 0:
            raise ValueError("need n >= 1, beta > 0 and muM > 0")
        if not self.mu1 > self.muM:
            raise ValueError(f"need mu1 > muM, got {self.mu1} <= {self.muM}")
        if not self.kappa > self.beta / self.mu1:
            raise ValueError(f"need kappa > beta/mu1 = {self.beta / self.mu1}, got {self.kappa}")

    @property
    def rn(self) -> float:
        return math.sqrt(self.n)

    @property
    def b(self) -> float:
        """Fluid fixed point of ``-v1``: ``beta / (muM sqrt(n))``."""
        return self.beta / (self.muM * self.rn)

    @property
    def threshold(self) -> float:
        """``kappa / sqrt(n)``."""
        return self.kappa / self.rn

    def c5(self) -> float:
        """Constant in the bound ``f11 <= c5 sqrt(n)``."""
        k, bm = self.kappa, self.beta / self.mu1
        return (self.mu1 + self.muM) / (self.beta * self.mu1) * k / (k - bm)

    def c6(self) -> float:
        """Constant in the bound ``f22 <= c6 sqrt(n)``."""
        k, bm = self.kappa, self.beta / self.mu1
        gap = self.mu1 - self.muM
        return (1.0 / (self.mu1 * k) + (self.mu1 / gap) ** 2 * k / (k - bm) / self.beta
                + self.mu1 * (1.0 + self.muM) / gap / self.beta)


@dataclass(frozen=True)
class RegionTag:
    region: int
    tau: float | None = None

    @property
    def name(self) -> str:
        return f"Omega{self.region}"


def _newton_bisect(f, df, lo: float, hi: float, f_lo: float, max_iter: int = 200) -> float:
    """Root of an increasing-through-zero `f` on ``[lo, hi]`` with ``f(lo) < 0 <= f(hi)``.

    Newton steps are taken when they stay inside the current bracket,
    bisection otherwise; stops at floating-point resolution.
    """
    t = 0.5 * (lo + hi)
    for _ in range(max_iter):
        v = f(t)
        if v == 0.0:
            return t
        if (v < 0) == (f_lo < 0):
            lo = t
        else:
            hi = t
        d = df(t)
        nt = t - v / d if d != 0 else lo - 1.0
        if not lo < nt < hi:
            nt = 0.5 * (lo + hi)
        if abs(nt - t) <= 2 * _EPS * max(1.0, abs(t)) or hi - lo <= 2 * _EPS * max(1.0, hi):
            return nt
        t = nt
    return t


def g_tau(x, tau: float, ctx: LyapunovContext) -> float:
    """Value of ``v1`` at time `tau` on the exponential phase started at x."""
    x1, x2 = x
    b = ctx.b
    em = math.exp(-ctx.muM * tau)
    e1 = math.exp(-ctx.mu1 * tau)
    return -b + (x1 + b) * em - ctx.mu1 * x2 / (ctx.mu1 - ctx.muM) * (e1 - em)


def solve_tau(x, ctx: LyapunovContext) -> float:
    """First time the exponential-phase flow from x reaches ``x1 = 0``.

    Returns ``math.inf`` when it never does. ``g_tau(x, .)`` has at most one
    interior maximum, so the first root (if any) lies before it and is found
    by safeguarded Newton on a bracket where ``g`` increases.
    """
    x1, x2 = float(x[0]), float(x[1])
    if x1 >= 0.0:
        return 0.0
    mu1, muM = ctx.mu1, ctx.muM
    b = ctx.b
    c = mu1 * x2 / (mu1 - muM)
    A = x1 + b
    if c <= 0.0 or A + c <= 0.0:
        return math.inf
    ratio = muM * (A + c) / (c * mu1)
    if ratio >= 1.0:
        return math.inf
    t_peak = -math.log(ratio) / (mu1 - muM)

    def g(t):
        return -b + (A + c) * math.exp(-muM * t) - c * math.exp(-mu1 * t)

    def dg(t):
        return -muM * (A + c) * math.exp(-muM * t) + c * mu1 * math.exp(-mu1 * t)

    if g(t_peak) < 0.0:
        return math.inf
    return _newton_bisect(g, dg, 0.0, t_peak, x1)


def tau_sensitivities(x, tau: float, ctx: LyapunovContext) -> tuple[float, float]:
    """Partial derivatives of the hitting time with respect to x1 and x2."""
    x2 = x[1]
    mu1, muM = ctx.mu1, ctx.muM
    em, e1 = math.exp(-muM * tau), math.exp(-mu1 * tau)
    den = mu1 * x2 * e1 - ctx.beta / ctx.rn
    return -em / den, mu1 / (mu1 - muM) * (e1 - em) / den


def x2_star(x1: float, kappa_curve: float, ctx: LyapunovContext) -> float:
    """Height of the curve for barrier `kappa_curve` above `x1`.

    The flow started at ``(x1, x2_star)`` reaches ``x1 = 0`` at the moment
    ``v2 = kappa_curve / sqrt(n)``. Writing ``x2 = (kappa_curve/sqrt(n))
    exp(mu1 tau)`` turns this into one increasing equation in tau.
    """
    if kappa_curve < ctx.beta / ctx.mu1:
        raise ValueError("kappa_curve must be at least beta/mu1")
    thr = kappa_curve / ctx.rn
    if x1 >= 0.0:
        return thr
    mu1, muM = ctx.mu1, ctx.muM
    b = ctx.b
    K = mu1 * thr / (mu1 - muM)
    gap = mu1 - muM

    def H(t):
        return -b + (x1 + b) * math.exp(-muM * t) - K * (1.0 - math.exp(gap * t))

    def dH(t):
        return -muM * (x1 + b) * math.exp(-muM * t) + K * gap * math.exp(gap * t)

    hi = 1.0
    while H(hi) < 0.0:
        hi *= 2.0
    tau = _newton_bisect(H, dH, 0.0, hi, x1)
    return thr * math.exp(mu1 * tau)


def classify_region(x, ctx: LyapunovContext) -> RegionTag:
    """Region of x; points exactly on the curve belong to Omega2."""
    x1, x2 = float(x[0]), float(x[1])
    if x2 <= ctx.threshold:
        return RegionTag(OMEGA1)
    if x2 > x2_star(x1, ctx.kappa, ctx):
        tau = solve_tau((x1, x2), ctx)
        if math.isfinite(tau):
            return RegionTag(OMEGA3, tau)
    # a point on the curve up to rounding falls back to Omega2
    return RegionTag(OMEGA2)


def _tag(x, ctx, region):
    return classify_region(x, ctx) if region is None else region


def f_star(x, ctx: LyapunovContext, region: RegionTag | None = None) -> float:
    x1, x2 = float(x[0]), float(x[1])
    r = _tag(x, ctx, region)
    thr = ctx.threshold
    mu1 = ctx.mu1
    if r.region == OMEGA1:
        return 0.0
    if r.region == OMEGA2:
        return x2 / mu1 - thr / mu1 - thr / mu1 * math.log(x2 / thr)
    tau = r.tau
    e1 = math.exp(-mu1 * tau)
    return (x2 / mu1 - x2 / mu1 * e1 - thr * tau
            + ctx.rn / (2 * ctx.beta) * (x2 * e1 - thr) ** 2)


def _theta(tau, ctx):
    mu1, muM = ctx.mu1, ctx.muM
    em, e1 = math.exp(-muM * tau), math.exp(-mu1 * tau)
    return mu1 / (mu1 - muM) * (em - e1) + e1


def grad_f_star(x, ctx: LyapunovContext, region: RegionTag | None = None) -> tuple[float, float]:
    """Analytic ``(df/dx1, df/dx2)``."""
    x1, x2 = float(x[0]), float(x[1])
    r = _tag(x, ctx, region)
    thr = ctx.threshold
    mu1 = ctx.mu1
    if r.region == OMEGA1:
        return 0.0, 0.0
    if r.region == OMEGA2:
        return 0.0, 1.0 / mu1 - thr / (mu1 * x2)
    tau = r.tau
    em, e1 = math.exp(-ctx.muM * tau), math.exp(-mu1 * tau)
    s = ctx.rn / ctx.beta
    gap = x2 * e1 - thr
    f1 = s * em * gap
    f2 = (1.0 - e1) / mu1 + gap * s * _theta(tau, ctx)
    return f1, f2


def hess_f_star(x, ctx: LyapunovContext, region: RegionTag | None = None) -> tuple[float, float, float]:
    """Analytic ``(f11, f12, f22)`` away from region boundaries."""
    x1, x2 = float(x[0]), float(x[1])
    r = _tag(x, ctx, region)
    thr = ctx.threshold
    mu1, muM = ctx.mu1, ctx.muM
    if r.region == OMEGA1:
        return 0.0, 0.0, 0.0
    if r.region == OMEGA2:
        return 0.0, 0.0, thr / (mu1 * x2 * x2)
    tau = r.tau
    em, e1 = math.exp(-muM * tau), math.exp(-mu1 * tau)
    s = ctx.rn / ctx.beta
    t1, t2 = tau_sensitivities((x1, x2), tau, ctx)
    inner = -x2 * e1 + muM / (mu1 + muM) * thr
    f11 = s * (mu1 + muM) * t1 * em * inner
    # d/dx2 of f1 also differentiates the explicit x2 factor
    f12 = s * em * e1 + s * (mu1 + muM) * t2 * em * inner
    theta = _theta(tau, ctx)
    theta2 = -mu1 * muM / (mu1 - muM) * (em - e1) * t2
    f22 = e1 * (t2 * (1.0 - s * mu1 * x2 * theta) + s * theta) + s * (x2 * e1 - thr) * theta2
    return f11, f12, f22


def hess_diag_f_star(x, ctx: LyapunovContext, region: RegionTag | None = None) -> tuple[float, float]:
    f11, _, f22 = hess_f_star(x, ctx, region)
    return f11, f22


def L_apply(grads, x, ctx: LyapunovContext) -> float:
    """First-order operator ``(-beta/sqrt(n) - muM x1 + mu1 x2) f1 - mu1 x2 f2``."""
    f1, f2 = grads
    x1, x2 = x
    return (-ctx.beta / ctx.rn - ctx.muM * x1 + ctx.mu1 * x2) * f1 - ctx.mu1 * x2 * f2


def pde_residual(x, ctx: LyapunovContext, region: RegionTag | None = None) -> float:
    """``L f_star(x) + (x2 - kappa/sqrt(n))^+``, which should vanish."""
    r = _tag(x, ctx, region)
    return L_apply(grad_f_star(x, ctx, r), x, ctx) + max(float(x[1]) - ctx.threshold, 0.0)


def _exp_phase(x1, x2, t, ctx):
    mu1, muM = ctx.mu1, ctx.muM
    b = ctx.b
    c = mu1 * x2 / (mu1 - muM)
    em, e1 = math.exp(-muM * t), math.exp(-mu1 * t)
    return -b + (x1 + b) * em + c * (em - e1), x2 * e1


def fluid_trajectory(x, t: float, ctx: LyapunovContext) -> tuple[float, float]:
    """Position of the fluid flow started at x after time t."""
    x1, x2 = float(x[0]), float(x[1])
    if t <= 0:
        return x1, x2
    tau = solve_tau((x1, x2), ctx)
    if not math.isfinite(tau) or t < tau:
        return _exp_phase(x1, x2, t, ctx)
    drop = ctx.beta / ctx.rn
    v2_hit = x2 * math.exp(-ctx.mu1 * tau)
    floor = ctx.beta / (ctx.mu1 * ctx.rn)
    t_leave = tau + max(v2_hit - floor, 0.0) / drop
    if t < t_leave:
        return 0.0, v2_hit - drop * (t - tau)
    # the drift at (0, floor) points into x1 < 0, so the flow never returns
    return _exp_phase(0.0, floor, t - t_leave, ctx)


def boundary_times(x, ctx: LyapunovContext) -> tuple[float, float]:
    """Times the flow from x reaches and then leaves the boundary ``x1 = 0``."""
    tau = solve_tau(x, ctx)
    if not math.isfinite(tau):
        return math.inf, math.inf
    v2_hit = float(x[1]) * math.exp(-ctx.mu1 * tau)
    floor = ctx.beta / (ctx.mu1 * ctx.rn)
    return tau, tau + max(v2_hit - floor, 0.0) * ctx.rn / ctx.beta


def drift_V(q: OccupancyState, cfg: SystemConfig) -> tuple[int, float]:
    """Idle servers outside the slowest pool and their SA-JSQ generator drift."""
    c = q.counts
    V = int(sum(cfg.pool_sizes[:-1]) - c[:-1, 0].sum())
    nxt = c[:-1, 1] if c.shape[1] > 1 else np.zeros(cfg.M - 1, dtype=np.int64)
    gen = -cfg.arrival_rate * (V > 0) + float(np.dot(cfg.speeds[:-1], c[:-1, 0] - nxt))
    return V, gen
