"""Compiled versus pure-Python kernels on the same workloads.

Run with ``python benchmarks/bench_kernels.py``. Each workload is executed
once per backend with identical seeds; the script checks the outputs agree
before reporting timings.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from hetlb import _backend
from hetlb.coupling import coupled_run
from hetlb.ctmc_sim import Simulator
from hetlb.diffusion import DiffusionParams, integrate_limit_sde
from hetlb.model import proportioned_config
from hetlb.policy import SA_JSQ_KIND, pod


def ctmc(backend, n, horizon):
    sim = Simulator(proportioned_config(n), SA_JSQ_KIND, seed=1, backend=backend)
    sim.advance(horizon)
    return sim.events, sim.counts.copy()


def ctmc_pod(backend, n, horizon):
    sim = Simulator(proportioned_config(n), pod(2), seed=1, backend=backend)
    sim.advance(horizon)
    return sim.events, sim.counts.copy()


def couple(backend, n, horizon):
    tr = coupled_run(proportioned_config(n), SA_JSQ_KIND, horizon, seed=1, log=False, backend=backend)
    return tr.modified.A + tr.potential_departures, tr.final.counts.copy()


def sde(backend, n, horizon):
    p = DiffusionParams(2.0, 2.5, 0.625, h=5e-3, horizon=horizon)
    path = integrate_limit_sde(p, seed=1, record_every=100, backend=backend)
    return int(round(horizon / p.h)), path.yM1


WORKLOADS = {"ctmc sa-jsq": ctmc, "ctmc pod:2": ctmc_pod, "coupled": couple, "sde": sde}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--horizon", type=float, default=50.0)
    args = ap.parse_args(argv)
    if not _backend.COMPILED:
        print("compiled extension not built; only the Python backend is available")
    print(f"{'workload':<14}{'events':>10}{'python s':>11}{'compiled s':>12}{'speedup':>9}")
    for name, fn in WORKLOADS.items():
        horizon = args.horizon * (20 if name == "sde" else 1)
        times, outs = {}, {}
        for be in ("python", "compiled") if _backend.COMPILED else ("python",):
            t0 = time.perf_counter()
            outs[be] = fn(be, args.n, horizon)
            times[be] = time.perf_counter() - t0
        if len(outs) == 2:
            assert outs["python"][0] == outs["compiled"][0]
            assert np.array_equal(outs["python"][1], outs["compiled"][1]), name
        tc = times.get("compiled", float("nan"))
        print(f"{name:<14}{outs['python'][0]:>10}{times['python']:>11.3f}{tc:>12.4f}"
              f"{times['python'] / tc:>9.1f}")


if __name__ == "__main__":
    main()
