"""Numerical integration of the limiting diffusion.

The limit is a two-dimensional reflected Ornstein-Uhlenbeck system for
``(yM1, y12)``: ``yM1`` is the scaled idle-server deficit, kept at or below
zero by a regulator ``u1`` that pushes the excess into ``y12``. The deeper
tail levels follow linear ODEs ``y'_{j,i} = -mu_j (y_{j,i} - y_{j,i+1})``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import _backend
from ._pykernels import STEP_TOO_LARGE
from .errors import StepTooLarge
from .stats import mean_se

CHUNK = 1 << 16


def skorokhod_reflect(path, kappa: float = math.inf) -> tuple[np.ndarray, np.ndarray]:
    """One-sided reflection of a discrete path below the barrier `kappa`.

    Returns ``(phi, psi)`` with ``psi_k = max_{s<=k} (path_s - kappa)^+`` and
    ``phi = path - psi``. An infinite barrier returns the path unchanged.
    """
    x = np.asarray(path, dtype=float)
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    if math.isinf(kappa):
        return x.copy(), np.zeros_like(x)
    psi = np.maximum.accumulate(np.maximum(x - kappa, 0.0)) if x.size else x.copy()
    return x - psi, psi


@dataclass(frozen=True)
class DiffusionParams:
    """Parameters of the limit system.

    ``speeds`` lists every pool speed (fastest first) for the tail ODEs; it
    defaults to ``(mu1, muM)``.
    """

    beta: float
    mu1: float
    muM: float
    sigma: float = math.sqrt(2.0)
    h: float = 5e-3
    horizon: float = 10.0
    speeds: tuple[float, ...] | None = None

    def __post_init__(self):
        if min(self.beta, self.mu1, self.muM) <= 0:
            raise ValueError("beta, mu1 and muM must be positive")
        if not self.mu1 > self.muM:
            raise ValueError("need mu1 > muM")
        if self.sigma < 0 or self.h <= 0 or self.horizon < 0:
            raise ValueError("need sigma >= 0, h > 0 and horizon >= 0")
        sp = self.pool_speeds
        if sp[0] != self.mu1 or sp[-1] != self.muM:
            raise ValueError("speeds must start with mu1 and end with muM")

    @property
    def pool_speeds(self) -> tuple[float, ...]:
        return tuple(self.speeds) if self.speeds is not None else (self.mu1, self.muM)

    @classmethod
    def from_config(cls, cfg, **kw) -> "DiffusionParams":
        return cls(cfg.beta, cfg.speeds[0], cfg.speeds[-1], speeds=tuple(cfg.speeds), **kw)


@dataclass
class DiffusionPath:
    """Recorded path; ``tail[k, j, i]`` is ``y_{j, i+2}`` at ``times[k]``."""

    times: np.ndarray
    yM1: np.ndarray
    y12: np.ndarray
    u1: np.ndarray
    tail: np.ndarray | None = field(default=None, repr=False)

    def to_rows(self):
        for k, t in enumerate(self.times):
            row = [float(t), float(self.yM1[k]), float(self.y12[k]), float(self.u1[k])]
            if self.tail is not None:
                row.extend(float(v) for v in self.tail[k].ravel())
            yield row


def _initial_tail(p: DiffusionParams, y12: float, tail) -> np.ndarray:
    M = len(p.pool_speeds)
    if tail is None:
        arr = np.zeros((M, 2))
    else:
        arr = np.array(tail, dtype=float, ndmin=2)
        if arr.shape[0] != M:
            raise ValueError(f"tail needs {M} rows, got {arr.shape[0]}")
        arr = np.pad(arr, ((0, 0), (0, 1)))  # keep a zero deepest level
    arr[0, 0] = y12
    if (arr < 0).any():
        raise ValueError("tail components must be non-negative")
    return np.ascontiguousarray(arr)


def normal_stream(seed: int) -> np.random.Generator:
    """Generator for the Brownian increments of :func:`integrate_limit_sde`."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0x5DE,))))


def integrate_limit_sde(p: DiffusionParams, y0=(0.0, 0.0, None), seed: int = 0,
                        record_every: int = 1, record_tail: bool = False,
                        normals=None, backend: str = "auto") -> DiffusionPath:
    """Euler-Maruyama path of the reflected limit system on ``[0, p.horizon]``.

    Parameters
    ----------
    p : DiffusionParams
    y0 : (yM1, y12, tail)
        Initial point with ``yM1 <= 0`` and ``y12 >= 0``. ``tail`` is an
        optional ``(M, K)`` array of levels two and deeper, whose ``[0, 0]``
        entry is overwritten by ``y12``.
    seed : int
    record_every : int
        Record the state every this many steps (the initial point is always
        recorded).
    normals : array_like, optional
        Standard normal draws, one per step, used instead of the seeded
        stream. Lets callers refine a path with the same Brownian motion.

    Raises
    ------
    StepTooLarge
        If an explicit tail update overshoots below zero.
    """
    yM1, y12, tail = y0
    if yM1 > 0 or y12 < 0:
        raise ValueError("need yM1 <= 0 and y12 >= 0")
    K = _backend.get(backend)
    tl = _initial_tail(p, y12, tail)
    steps = int(round(p.horizon / p.h))
    stride = max(1, int(record_every))
    nrec = steps // stride
    out = np.zeros((nrec + 1, 3))
    out[0] = (yM1, y12, 0.0)
    out_tail = np.zeros((nrec + 1,) + tl.shape if record_tail else (0,) + tl.shape)
    if record_tail:
        out_tail[0] = tl
    y = np.array([float(yM1), 0.0])
    speeds = np.asarray(p.pool_speeds, dtype=float)
    acc = np.zeros(5)
    opos = np.zeros(1, dtype=np.int64)  # relative to the out[1:] views
    if normals is not None:
        normals = np.ascontiguousarray(normals, dtype=float)
        if normals.size < steps:
            raise ValueError(f"need {steps} normals, got {normals.size}")
    gen = normal_stream(seed)
    chunk = stride * max(1, CHUNK // stride)
    done = 0
    while done < steps:
        m = min(chunk, steps - done)
        z = normals[done:done + m] if normals is not None else gen.standard_normal(m)
        status = K.sde_advance(y, tl, speeds, p.beta, p.sigma, p.h, z, stride,
                               out[1:], out_tail[1:], opos, acc)
        if status == STEP_TOO_LARGE:
            raise StepTooLarge(f"tail went negative near t={(done + m) * p.h:.4g}; reduce h={p.h}")
        done += m
    times = np.arange(nrec + 1) * stride * p.h
    return DiffusionPath(times, out[:, 0].copy(), out[:, 1].copy(), out[:, 2].copy(),
                         out_tail if record_tail else None)


def ode_tail(y0_tail, mu_j: float, t):
    """Tail levels of one pool after time `t` under the linear tail ODEs.

    ``y0_tail[k]`` is level ``k + 2``; levels below the last entry are zero.
    Returns an array of the same length (or one row per entry of an array
    `t`).
    """
    y = np.asarray(y0_tail, dtype=float)
    K = y.size
    A = -mu_j * (np.eye(K) - np.eye(K, k=1))
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    res = np.array([sla.expm(A * s) @ y for s in ts])
    return res[0] if np.ndim(t) == 0 else res


@dataclass
class SDEMoments:
    """Time-average moments of ``(yM1, y12)`` with batch-means errors."""

    mean: np.ndarray
    var: np.ndarray
    se: np.ndarray
    n_batches: int
    samples: np.ndarray | None = field(default=None, repr=False)
    steps: int = 0


def sde_stationary_estimate(p: DiffusionParams, burn: float, duration: float, seed: int = 0,
                            n_batches: int = 20, sample_every: float | None = None,
                            backend: str = "auto") -> SDEMoments:
    """Long-run means and variances of ``(yM1, y12)`` over ``[burn, burn + duration]``.

    The path starts at the zero-noise equilibrium ``(-beta/muM, 0)``. When
    `sample_every` is given, states spaced that far apart are returned in
    ``samples`` with shape ``(k, 2)``.
    """
    K = _backend.get(backend)
    tl = _initial_tail(p, 0.0, None)
    y = np.array([-p.beta / p.muM, 0.0])
    speeds = np.asarray(p.pool_speeds, dtype=float)
    gen = normal_stream(seed)
    burn_steps = int(round(burn / p.h))
    batch_steps = int(round(duration / p.h / n_batches))
    if batch_steps < 1:
        raise ValueError("duration too short for the number of batches")
    stride = max(1, int(round(sample_every / p.h))) if sample_every else 0
    if stride:
        batch_steps = max(stride, batch_steps // stride * stride)
    empty = np.zeros((0, 3)), np.zeros((0,) + tl.shape)

    def run(steps, acc, out=None):
        opos = np.zeros(1, dtype=np.int64)
        o, ot = out if out is not None else empty
        left = steps
        chunk = (stride or 1) * max(1, CHUNK // (stride or 1))
        while left:
            m = min(chunk, left)
            status = K.sde_advance(y, tl, speeds, p.beta, p.sigma, p.h, gen.standard_normal(m),
                                   stride or 1, o, ot, opos, acc)
            if status == STEP_TOO_LARGE:
                raise StepTooLarge(f"tail went negative; reduce h={p.h}")
            left -= m

    run(burn_steps, np.zeros(5))
    rows, sq, chunks = [], np.zeros(2), []
    for _ in range(n_batches):
        acc = np.zeros(5)
        out = None
        if stride:
            out = (np.zeros((batch_steps // stride, 3)), empty[1])
        run(batch_steps, acc, out)
        rows.append(acc[:2] / acc[4])
        sq += acc[2:4]
        if out is not None:
            chunks.append(out[0][:, :2])
    batch = np.array(rows)
    mean, se = mean_se(batch)
    var = sq / (n_batches * batch_steps) - mean ** 2
    samples = np.concatenate(chunks) if chunks else None
    return SDEMoments(mean, var, se, n_batches, samples, n_batches * batch_steps + burn_steps)
