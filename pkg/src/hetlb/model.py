"""System configuration, occupancy states and diffusion scaling.

The occupancy of a system with ``M`` server pools is stored as a tail-count
matrix: ``counts[j, i]`` is the number of pool-``j`` servers holding at least
``i + 1`` jobs (pools and levels are 0-based here).  Rows are non-increasing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    CapacityNotNormalized,
    ConfigError,
    LambdaOutOfRange,
    NonDecreasingSpeeds,
    PoolSumMismatch,
)

INITIAL_DEPTH = 4
CAPACITY_TOL = 1e-9


@dataclass(frozen=True)
class SystemConfig:
    """Parameters of the n-server system.

    Attributes
    ----------
    n : int
        Total number of servers.
    pool_sizes : tuple of int
        Servers per pool, fastest pool first.
    speeds : tuple of float
        Service rate of a server in each pool, strictly decreasing.
    beta : float
        Halfin-Whitt slack; the default arrival rate per server is
        ``1 - beta / sqrt(n)``.
    lam : float, optional
        Normalized arrival rate per server. ``None`` means the default above.
    gammas : tuple of float, optional
        Limiting pool fractions. When given they must satisfy
        ``sum(speeds * gammas) == 1``.
    """

    n: int
    pool_sizes: tuple[int, ...]
    speeds: tuple[float, ...]
    beta: float
    lam: float | None = None
    gammas: tuple[float, ...] | None = None

    @property
    def M(self) -> int:
        return len(self.pool_sizes)

    @property
    def sqrt_n(self) -> float:
        return math.sqrt(self.n)

    @property
    def arrival_rate(self) -> float:
        """Total arrival rate ``n * lam``."""
        return self.n * self.lam

    @property
    def capacity(self) -> float:
        """Total service capacity ``sum_j mu_j N_j``."""
        return float(sum(m * k for m, k in zip(self.speeds, self.pool_sizes)))


def validate_config(raw: SystemConfig) -> SystemConfig:
    """Check the invariants of `raw` and fill in the default arrival rate.

    Raises
    ------
    NonDecreasingSpeeds, PoolSumMismatch, CapacityNotNormalized, LambdaOutOfRange
    """
    if raw.n < 1:
        raise ConfigError(f"n must be positive, got {raw.n}")
    sizes = tuple(int(k) for k in raw.pool_sizes)
    speeds = tuple(float(m) for m in raw.speeds)
    if len(sizes) == 0 or len(sizes) != len(speeds):
        raise ConfigError("pool_sizes and speeds must be non-empty and of equal length")
    if any(k < 1 for k in sizes):
        raise ConfigError(f"pool sizes must be positive, got {sizes}")
    if sum(sizes) != raw.n:
        raise PoolSumMismatch(f"pool sizes {sizes} sum to {sum(sizes)}, expected n={raw.n}")
    if speeds[-1] <= 0 or any(a <= b for a, b in zip(speeds, speeds[1:])):
        raise NonDecreasingSpeeds(f"speeds must be positive and strictly decreasing, got {speeds}")
    if raw.beta <= 0:
        raise ConfigError(f"beta must be positive, got {raw.beta}")
    gammas = None
    if raw.gammas is not None:
        gammas = tuple(float(g) for g in raw.gammas)
        if len(gammas) != len(speeds) or any(g <= 0 for g in gammas):
            raise ConfigError(f"gammas must be {len(speeds)} positive numbers, got {gammas}")
        total = math.fsum(m * g for m, g in zip(speeds, gammas))
        if abs(total - 1.0) > CAPACITY_TOL:
            raise CapacityNotNormalized(f"sum(mu_j * gamma_j) = {total!r}, expected 1")
    lam = 1.0 - raw.beta / math.sqrt(raw.n) if raw.lam is None else float(raw.lam)
    if not 0.0 < lam < 1.0:
        raise LambdaOutOfRange(f"lambda must lie in (0, 1), got {lam}")
    return SystemConfig(raw.n, sizes, speeds, float(raw.beta), lam, gammas)


def pool_sizes_from_fractions(n: int, gammas) -> tuple[int, ...]:
    """Largest-remainder rounding of ``n * gammas`` to integers summing to n."""
    raw = np.asarray(gammas, dtype=float) * n
    base = np.floor(raw).astype(int)
    short = n - int(base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return tuple(int(k) for k in base)


def proportioned_config(n: int, gammas=(0.2, 0.8), speeds=(2.5, 0.625), beta: float = 2.0,
                        lam: float | None = None) -> SystemConfig:
    """Validated config whose pool sizes follow the fractions `gammas`.

    The defaults are the two-pool setting used throughout the experiments:
    one fifth of the servers at rate 2.5 and the rest at rate 0.625.
    """
    sizes = pool_sizes_from_fractions(n, gammas)
    return validate_config(SystemConfig(n, sizes, tuple(speeds), beta, lam, tuple(gammas)))


def _parse_list(value: str, cast):
    value = value.strip().strip("[]()")
    return tuple(cast(v) for v in value.replace(",", " ").split())


def parse_config_text(text: str) -> tuple[SystemConfig, int | None]:
    """Parse a flat ``key = value`` config.

    Recognized keys are ``n, m, pool_sizes, speeds, beta, lambda, gammas,
    seed``. ``pool_sizes`` may be omitted when ``gammas`` is given. Returns
    the validated config and the seed (``None`` if absent).
    """
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key.lower()] = value
    unknown = set(raw) - {"n", "m", "pool_sizes", "speeds", "beta", "lambda", "gammas", "seed"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        n = int(raw["n"])
        speeds = _parse_list(raw["speeds"], float)
        beta = float(raw["beta"])
    except KeyError as exc:
        raise ConfigError(f"missing config key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    gammas = _parse_list(raw["gammas"], float) if "gammas" in raw else None
    if "pool_sizes" in raw:
        sizes = _parse_list(raw["pool_sizes"], int)
    elif gammas is not None:
        sizes = pool_sizes_from_fractions(n, gammas)
    else:
        raise ConfigError("either pool_sizes or gammas is required")
    if "m" in raw and int(raw["m"]) != len(sizes):
        raise ConfigError(f"m = {raw['m']} but {len(sizes)} pool sizes given")
    lam = float(raw["lambda"]) if "lambda" in raw else None
    seed = int(raw["seed"]) if "seed" in raw else None
    return validate_config(SystemConfig(n, sizes, speeds, beta, lam, gammas)), seed


def load_config(path: str | Path) -> tuple[SystemConfig, int | None]:
    return parse_config_text(Path(path).read_text())


@dataclass(frozen=True)
class OccupancyState:
    """Tail counts ``counts[j, i] = #{pool-j servers with >= i+1 jobs}``."""

    counts: np.ndarray
    clock: float = 0.0

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64, copy=True)
        if c.ndim != 2:
            raise ValueError("counts must be a 2-d array")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @classmethod
    def empty(cls, cfg: SystemConfig, depth: int = INITIAL_DEPTH) -> "OccupancyState":
        return cls(np.zeros((cfg.M, depth), dtype=np.int64))

    @classmethod
    def from_queue_lengths(cls, cfg: SystemConfig, lengths, depth: int | None = None) -> "OccupancyState":
        """Build counts from per-pool lists of queue lengths."""
        deepest = max((max(row, default=0) for row in lengths), default=0)
        depth = max(depth or INITIAL_DEPTH, deepest + 1)
        c = np.zeros((cfg.M, depth), dtype=np.int64)
        for j, row in enumerate(lengths):
            if len(row) != cfg.pool_sizes[j]:
                raise ValueError(f"pool {j} has {cfg.pool_sizes[j]} servers, got {len(row)} lengths")
            for q in row:
                c[j, :q] += 1
        return cls(c)

    @property
    def total_jobs(self) -> int:
        return int(self.counts.sum())

    def queue_lengths(self) -> list[list[int]]:
        """Per-pool lengths of the busy servers, longest first (idle servers omitted)."""
        out = []
        for row in self.counts:
            lengths = []
            for i in range(len(row)):
                nxt = row[i + 1] if i + 1 < len(row) else 0
                lengths += [i + 1] * int(row[i] - nxt)
            out.append(sorted(lengths, reverse=True))
        return out

    def check(self, cfg: SystemConfig) -> None:
        """Raise ``ValueError`` unless the counts are valid for `cfg`."""
        c = self.counts
        if c.shape[0] != cfg.M:
            raise ValueError(f"expected {cfg.M} pools, got {c.shape[0]}")
        if (c < 0).any():
            raise ValueError("negative tail count")
        if (c[:, 0] > np.asarray(cfg.pool_sizes)).any():
            raise ValueError("more busy servers than pool size")
        if (np.diff(c, axis=1) > 0).any():
            raise ValueError("tail counts must be non-increasing in the level")


@dataclass(frozen=True)
class ScaledState:
    """Diffusion-scaled occupancy.

    ``y[j, 0] = (Q_{j,1} - N_j) / sqrt(n)`` and ``y[j, i] = Q_{j,i+1} / sqrt(n)``
    for ``i >= 1``.  ``idle_fast`` sums the first column over all pools but
    the slowest; ``y_plus1`` and ``y_plus2`` scale the total and the waiting
    job counts.
    """

    y: np.ndarray
    idle_fast: float
    y_plus1: float
    y_plus2: float = field(default=0.0)


def scale_state(q: OccupancyState, cfg: SystemConfig) -> ScaledState:
    c = q.counts
    y = c.astype(float)
    y[:, 0] -= np.asarray(cfg.pool_sizes, dtype=float)
    y /= cfg.sqrt_n
    y.setflags(write=False)
    idle = float(c[:-1, 0].sum() - sum(cfg.pool_sizes[:-1])) / cfg.sqrt_n
    plus1 = float(c.sum() - cfg.n) / cfg.sqrt_n
    plus2 = float(c[:, 1:].sum()) / cfg.sqrt_n
    return ScaledState(y, idle, plus1, plus2)


def unscale_state(s: ScaledState, cfg: SystemConfig) -> OccupancyState:
    """Inverse of :func:`scale_state` on integer-grid states."""
    c = np.asarray(s.y, dtype=float) * cfg.sqrt_n
    c[:, 0] += np.asarray(cfg.pool_sizes, dtype=float)
    return OccupancyState(np.rint(c).astype(np.int64))


def aggregate_idle_fast(y: ScaledState) -> float:
    """Scaled idle count of all pools except the slowest (never positive)."""
    return float(np.sum(y.y[:-1, 0]))


def with_lambda(cfg: SystemConfig, lam: float) -> SystemConfig:
    return validate_config(replace(cfg, lam=lam))
