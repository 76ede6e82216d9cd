"""Experiment orchestration: policy comparisons, collapse sweeps and CSV output.

Replications fan out to a thread pool (the kernels release the GIL) and are
aggregated in replication order, so results do not depend on scheduling.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coupling import simulate_modified_stationary
from .ctmc_sim import simulate_stationary, simulate_transient
from .diffusion import DiffusionParams, sde_stationary_estimate
from .model import SystemConfig, proportioned_config
from .policy import PolicyKind, parse_policy
from .stats import batch_means, ecdf_distance, mean_se

__all__ = ["batch_means", "ecdf_distance", "ExperimentSpec", "PolicyRow", "Difference",
           "ComparisonReport", "compare_policies", "SSCRow", "ssc_sweep", "write_csv",
           "read_csv", "pmap"]

MODIFIED = "modified"
METRICS = ("y_plus1", "y_plus2")


def pmap(fn, items, threads: int = 1) -> list:
    """Map `fn` over `items`, in order, using up to `threads` worker threads."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


@dataclass
class ExperimentSpec:
    """What to run; validated on construction."""

    verb: str = "compare-policies"
    config: SystemConfig | None = None
    policies: tuple[str, ...] = ("sa-jsq", "jsq", "pod:2")
    n_values: tuple[int, ...] = ()
    reps: int = 1
    seed: int = 0
    out: str | None = None
    threads: int = 1
    warmup: float | None = None
    duration: float = 1000.0
    n_batches: int = 20
    include_modified: bool = True

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        for p in self.policies:
            if p != MODIFIED:
                parse_policy(p)
        for n in self.n_values:
            if n < 1:
                raise ValueError(f"invalid n {n}")

    def configs(self) -> list[SystemConfig]:
        """One config per requested n (default two-pool proportions when no base config)."""
        base = self.config
        if not self.n_values:
            return [base if base is not None else proportioned_config(100)]
        if base is None:
            return [proportioned_config(n) for n in self.n_values]
        gammas = base.gammas or tuple(k / base.n for k in base.pool_sizes)
        return [proportioned_config(n, gammas, base.speeds, base.beta) for n in self.n_values]


@dataclass
class PolicyRow:
    n: int
    policy: str
    y_plus1: float
    se_plus1: float
    y_plus2: float
    se_plus2: float
    arrivals: int
    batches: int


@dataclass
class Difference:
    """``lower - upper`` for one metric; negative when the ordering holds."""

    n: int
    lower: str
    upper: str
    metric: str
    diff: float
    combined_se: float
    paired_se: float


@dataclass
class ComparisonReport:
    rows: list[PolicyRow]
    differences: list[Difference]
    sde_reference: dict[str, float] = field(default_factory=dict)

    def row(self, n: int, policy: str) -> PolicyRow:
        for r in self.rows:
            if r.n == n and r.policy == policy:
                return r
        raise KeyError((n, policy))

    def difference(self, n: int, lower: str, upper: str, metric: str) -> Difference:
        for d in self.differences:
            if (d.n, d.lower, d.upper, d.metric) == (n, lower, upper, metric):
                return d
        raise KeyError((n, lower, upper, metric))


def _one(cfg, policy, spec, rep):
    if policy == MODIFIED:
        est = simulate_modified_stationary(cfg, spec.warmup, spec.duration, spec.n_batches,
                                           spec.seed, rep)
    else:
        est = simulate_stationary(cfg, parse_policy(policy), spec.warmup, spec.duration,
                                  spec.n_batches, spec.seed, rep)
    cols = [est.names.index(m) for m in METRICS]
    return est.batch_values[:, cols], est.arrivals


def compare_policies(spec: ExperimentSpec, sde_reference: bool = False) -> ComparisonReport:
    """Stationary ``E[Y_plus1]`` and ``E[Y_plus2]`` per policy with common random numbers.

    Every policy sees the same arrival stream in replication r (the
    comparison system included), and batch windows line up in time, so
    pairwise differences also get a paired standard error. Differences are
    reported against SA-JSQ: the comparison system below it and every other
    policy above it.
    """
    policies = list(spec.policies)
    if spec.include_modified and MODIFIED not in policies:
        policies.insert(0, MODIFIED)
    cfgs = spec.configs()
    jobs = [(cfg, p, r) for cfg in cfgs for p in policies for r in range(spec.reps)]
    out = pmap(lambda job: _one(job[0], job[1], spec, job[2]), jobs, spec.threads)
    batches: dict[tuple[int, str], np.ndarray] = {}
    rows = []
    k = 0
    for cfg in cfgs:
        for p in policies:
            vals, arr = [], 0
            for _ in range(spec.reps):
                v, a = out[k]
                k += 1
                vals.append(v)
                arr += a
            b = np.concatenate(vals)
            batches[(cfg.n, p)] = b
            m, s = mean_se(b)
            rows.append(PolicyRow(cfg.n, p, float(m[0]), float(s[0]), float(m[1]), float(s[1]),
                                  arr, b.shape[0]))
    diffs = []
    ref = "sa-jsq"
    for cfg in cfgs:
        if (cfg.n, ref) not in batches:
            continue
        pairs = [(MODIFIED, ref)] if (cfg.n, MODIFIED) in batches else []
        pairs += [(ref, p) for p in policies if p not in (ref, MODIFIED)]
        for lo, hi in pairs:
            a, b = batches[(cfg.n, lo)], batches[(cfg.n, hi)]
            ma, sa = mean_se(a)
            mb, sb = mean_se(b)
            _, sd = mean_se(a - b)
            for i, metric in enumerate(METRICS):
                diffs.append(Difference(cfg.n, lo, hi, metric, float(ma[i] - mb[i]),
                                        float(math.hypot(sa[i], sb[i])), float(sd[i])))
    ref_moments = {}
    if sde_reference:
        cfg = cfgs[0]
        mom = sde_stationary_estimate(DiffusionParams.from_config(cfg), 50.0, 2000.0, spec.seed)
        ref_moments = {"yM1_mean": float(mom.mean[0]), "y12_mean": float(mom.mean[1]),
                       "yM1_se": float(mom.se[0]), "y12_se": float(mom.se[1])}
    return ComparisonReport(rows, diffs, ref_moments)


@dataclass
class SSCRow:
    """Mean over replications of the supremum of the scaled fast-pool idleness."""

    n: int
    reps: int
    sample_sup: float
    sample_se: float
    event_sup: float
    event_se: float


def ssc_sweep(n_values, reps: int = 20, horizon: float = 10.0, sup_from: float = 1.0,
              dt: float = 0.01, seed: int = 0, kind: PolicyKind | None = None,
              base: SystemConfig | None = None, threads: int = 1) -> list[SSCRow]:
    """Collapse statistic ``sup_{t in [sup_from, horizon]} |Y_idle_fast(t)|`` versus n.

    Each replication starts empty. ``sample_sup`` takes the supremum over a
    grid of spacing `dt`; ``event_sup`` is the exact supremum over all
    events in the window.
    """
    from .policy import SA_JSQ_KIND

    kind = kind or SA_JSQ_KIND
    grid = np.arange(0.0, horizon + dt / 2, dt)
    grid = grid[grid <= horizon]
    rows = []
    for n in n_values:
        if base is None:
            cfg = proportioned_config(n)
        else:
            cfg = proportioned_config(n, base.gammas or tuple(k / base.n for k in base.pool_sizes),
                                      base.speeds, base.beta)
        trajs = pmap(lambda r: simulate_transient(cfg, kind, None, horizon, grid, seed, r,
                                                  sup_from), range(reps), threads)
        s = np.array([t.sup_idle_fast for t in trajs])
        e = np.array([t.event_sup_idle_fast for t in trajs])
        se = (lambda v: float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0)
        rows.append(SSCRow(n, reps, float(s.mean()), se(s), float(e.mean()), se(e)))
    return rows


# ----------------------------------------------------------------------------
# CSV emission; floats are written with repr so reading back is exact


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(rows, path_or_buf=None, columns=None) -> str:
    """Write dataclass rows (or tuples with `columns`) as CSV and return the text."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].__dataclass_fields__) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        vals = [getattr(r, c) for c in columns] if hasattr(r, "__dataclass_fields__") else list(r)
        w.writerow([_fmt(v) for v in vals])
    text = buf.getvalue()
    if path_or_buf is not None:
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w", newline="") as fh:
                fh.write(text)
    return text


def _parse(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def read_csv(path_or_text, row_type=None) -> list:
    """Read a CSV written by :func:`write_csv`, converting numeric cells.

    With `row_type` (a dataclass) the rows are rebuilt as instances.
    """
    text = path_or_text
    if "\n" not in str(path_or_text):
        with open(path_or_text, newline="") as fh:
            text = fh.read()
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    out = []
    for rec in reader:
        vals = {k: _parse(v) for k, v in zip(header, rec)}
        if row_type is not None:
            for name, f in row_type.__dataclass_fields__.items():
                if f.type in ("float", float):
                    vals[name] = float(vals[name])
                elif f.type in ("str", str):
                    vals[name] = str(vals[name])
            out.append(row_type(**vals))
        else:
            out.append(vals)
    return out
