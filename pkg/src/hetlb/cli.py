"""Command-line entry point ``hetlb``.

Exit codes: 0 on success, 2 for configuration errors, 3 when an invariant
check fails (coupling violation, Lyapunov residual or bound failure).
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import analysis, coupling, ctmc_sim, diffusion, lyapunov
from .errors import ConfigError, CouplingViolation, HetlbError, StepTooLarge
from .model import OccupancyState, load_config, proportioned_config
from .policy import parse_policy

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3


class _InvariantFailed(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _emit(args, verb: str, rows, columns=None) -> None:
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        analysis.write_csv(rows, out / f"{verb}.csv", columns)
    else:
        sys.stdout.write(analysis.write_csv(rows, None, columns))


def _config(args):
    """Config from --config, else the two-pool default at --n servers."""
    if args.config:
        cfg, seed = load_config(args.config)
        if args.seed is None and seed is not None:
            args.seed = seed
    else:
        cfg = proportioned_config(args.n)
    if args.seed is None:
        args.seed = 0
    return cfg


def cmd_simulate_transient(args) -> int:
    cfg = _config(args)
    q0 = None
    if args.initial:
        lengths = [[int(v) for v in line.replace(",", " ").split()]
                   for line in Path(args.initial).read_text().splitlines() if line.strip()]
        q0 = OccupancyState.from_queue_lengths(cfg, lengths)
    grid = np.arange(0.0, args.horizon + args.dt / 2, args.dt)
    grid = grid[grid <= args.horizon]
    tr = ctmc_sim.simulate_transient(cfg, parse_policy(args.policy), q0, args.horizon, grid,
                                     args.seed, 0, args.sup_from)
    L = tr.y.shape[2]
    cols = ["t"] + [f"y{j + 1}_{i + 1}" for j in range(cfg.M) for i in range(L)] + ["idle_fast"]
    rows = [(float(t), *map(float, tr.y[k].ravel()), float(tr.idle_fast[k]))
            for k, t in enumerate(tr.sample_times)]
    _emit(args, "simulate-transient", rows, cols)
    print(f"sup |idle_fast| on grid {tr.sup_idle_fast:.6g}, over events {tr.event_sup_idle_fast:.6g}",
          file=sys.stderr)
    return EXIT_OK


def cmd_simulate_stationary(args) -> int:
    cfg = _config(args)
    kind = parse_policy(args.policy)
    rows = []
    for r in range(args.reps):
        est = ctmc_sim.simulate_stationary(cfg, kind, args.warmup, args.duration, args.batches,
                                           args.seed, r)
        rows += [(r, name, est.means[name], est.ses[name], est.n_batches) for name in est.names]
    _emit(args, "simulate-stationary", rows, ["replication", "functional", "mean", "se", "batches"])
    return EXIT_OK


def cmd_sde(args) -> int:
    cfg = _config(args)
    p = diffusion.DiffusionParams.from_config(cfg, sigma=args.sigma, h=args.h, horizon=args.horizon)
    yM1, y12 = args.y0
    path = diffusion.integrate_limit_sde(p, (yM1, y12, None), args.seed,
                                         record_every=args.record_every, record_tail=args.tail)
    cols = ["t", "yM1", "y12", "u1"]
    if args.tail:
        M, K = path.tail.shape[1:]
        cols += [f"y{j + 1}_{i + 2}" for j in range(M) for i in range(K)]
    _emit(args, "sde", list(path.to_rows()), cols)
    return EXIT_OK


def cmd_couple(args) -> int:
    cfg = _config(args)
    kind = parse_policy(args.policy)
    if args.reps == 1:
        tr = coupling.coupled_run(cfg, kind, args.horizon, args.seed)
        _emit(args, "couple", list(tr.rows()), list(coupling.LOG_COLUMNS))
        return EXIT_OK
    # many seeds: summary only
    seeds = [args.seed + r for r in range(args.reps)]
    traces = analysis.pmap(lambda s: coupling.coupled_run(cfg, kind, args.horizon, s, log=False),
                           seeds, args.threads)
    rows = [(s, tr.modified.A, tr.potential_departures, tr.lost_departures, tr.balance_holds())
            for s, tr in zip(seeds, traces)]
    _emit(args, "couple", rows, ["seed", "arrivals", "potential_departures", "lost", "balance_ok"])
    if not all(r[-1] for r in rows):
        raise _InvariantFailed("counter balance failed")
    return EXIT_OK


def cmd_lyapunov_check(args) -> int:
    cfg = _config(args) if args.config else None
    if cfg is not None:
        n, beta, mu1, muM = cfg.n, cfg.beta, cfg.speeds[0], cfg.speeds[-1]
    else:
        n, beta, mu1, muM = args.n, args.beta, args.mu1, args.muM
        args.seed = 0 if args.seed is None else args.seed
    try:
        ctx = lyapunov.LyapunovContext(n, beta, mu1, muM, args.kappa)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rng = np.random.default_rng(args.seed)
    pts = np.column_stack([rng.uniform(-args.x1_max, 0.0, args.grid),
                           rng.uniform(0.0, args.x2_max, args.grid)])
    c5, c6 = ctx.c5() * ctx.rn, ctx.c6() * ctx.rn
    rows, bad = [], 0
    for x in pts:
        r = lyapunov.classify_region(x, ctx)
        f = lyapunov.f_star(x, ctx, r)
        f1, f2 = lyapunov.grad_f_star(x, ctx, r)
        f11, f12, f22 = lyapunov.hess_f_star(x, ctx, r)
        res = lyapunov.pde_residual(x, ctx, r)
        bad += (abs(res) > 1e-8 or min(f1, f11, f12, f22) < -1e-10 or f11 > c5 or f22 > c6)
        tau = r.tau if r.tau is not None else math.inf
        rows.append((float(x[0]), float(x[1]), r.name, tau, f, f1, f2, f11, f22, res))
    _emit(args, "lyapunov-check", rows,
          ["x1", "x2", "region", "tau", "f", "f1", "f2", "f11", "f22", "residual"])
    print(f"{bad} of {len(rows)} points failed", file=sys.stderr)
    if bad:
        raise _InvariantFailed(f"{bad} points failed the residual or derivative checks")
    return EXIT_OK


def cmd_compare_policies(args) -> int:
    base = load_config(args.config)[0] if args.config else None
    spec = analysis.ExperimentSpec("compare-policies", base, tuple(args.policies.split(",")),
                                   args.n_values, args.reps, args.seed or 0, args.out, args.threads,
                                   args.warmup, args.duration, args.batches)
    rep = analysis.compare_policies(spec)
    _emit(args, "compare-policies", rep.rows)
    if args.out:
        analysis.write_csv(rep.differences, Path(args.out) / "compare-policies-differences.csv")
    return EXIT_OK


def cmd_ssc_sweep(args) -> int:
    base = load_config(args.config)[0] if args.config else None
    rows = analysis.ssc_sweep(args.n_values, args.reps, args.horizon, args.sup_from, args.dt,
                              args.seed or 0, parse_policy(args.policy), base, args.threads)
    _emit(args, "ssc-sweep", rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output directory (CSV to stdout when omitted)")
    common.add_argument("--reps", type=int, default=1)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--policy", default="sa-jsq", help="sa-jsq, jsq, jiq or pod:<d>")
    common.add_argument("--n", type=int, default=100, help="servers when no config is given")

    p = argparse.ArgumentParser(prog="hetlb", description="Heterogeneous load-balancing toolkit")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("simulate-transient", parents=[common])
    s.add_argument("--horizon", type=float, default=10.0)
    s.add_argument("--dt", type=float, default=0.01)
    s.add_argument("--sup-from", type=float, default=1.0)
    s.add_argument("--initial", help="file with one line of queue lengths per pool")
    s.set_defaults(fn=cmd_simulate_transient)

    s = sub.add_parser("simulate-stationary", parents=[common])
    s.add_argument("--warmup", type=float, default=None)
    s.add_argument("--duration", type=float, default=1000.0)
    s.add_argument("--batches", type=int, default=20)
    s.set_defaults(fn=cmd_simulate_stationary)

    s = sub.add_parser("sde", parents=[common])
    s.add_argument("--h", type=float, default=5e-3)
    s.add_argument("--horizon", type=float, default=10.0)
    s.add_argument("--sigma", type=float, default=math.sqrt(2.0))
    s.add_argument("--y0", type=float, nargs=2, default=(0.0, 0.0), metavar=("YM1", "Y12"))
    s.add_argument("--record-every", type=int, default=1)
    s.add_argument("--tail", action="store_true", help="also write the tail levels")
    s.set_defaults(fn=cmd_sde)

    s = sub.add_parser("couple", parents=[common])
    s.add_argument("--horizon", type=float, default=100.0)
    s.set_defaults(fn=cmd_couple)

    s = sub.add_parser("lyapunov-check", parents=[common])
    s.add_argument("--grid", type=int, default=10_000)
    s.add_argument("--kappa", type=float, default=1.0)
    s.add_argument("--beta", type=float, default=2.0)
    s.add_argument("--mu1", type=float, default=2.5)
    s.add_argument("--muM", type=float, default=0.625)
    s.add_argument("--x1-max", type=float, default=5.0)
    s.add_argument("--x2-max", type=float, default=5.0)
    s.set_defaults(fn=cmd_lyapunov_check)

    s = sub.add_parser("compare-policies", parents=[common])
    s.add_argument("--n-values", type=_int_list, default=(200, 500))
    s.add_argument("--policies", default="sa-jsq,jsq,pod:2")
    s.add_argument("--warmup", type=float, default=None)
    s.add_argument("--duration", type=float, default=2000.0)
    s.add_argument("--batches", type=int, default=20)
    s.set_defaults(fn=cmd_compare_policies)

    s = sub.add_parser("ssc-sweep", parents=[common])
    s.add_argument("--n-values", type=_int_list, default=(100, 300, 700))
    s.add_argument("--horizon", type=float, default=10.0)
    s.add_argument("--sup-from", type=float, default=1.0)
    s.add_argument("--dt", type=float, default=0.01)
    s.set_defaults(fn=cmd_ssc_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.reps < 1 or args.threads < 1:
            raise ConfigError("--reps and --threads must be at least 1")
        return args.fn(args)
    except (ConfigError, StepTooLarge, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CouplingViolation, _InvariantFailed) as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except HetlbError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
