"""Compare the compiled splitting kernel against the numpy fallback.

Both backends are loaded into one process and swapped by rebinding
``loadsteer._kernel.admm_run`` (the solver looks the symbol up per call),
so the surrounding workload — polyhedron assembly, equilibration,
factorization, polish — is byte-for-byte identical.  Two workloads:

  cold   every home of a generated neighborhood solved from scratch
  warm   the same homes re-solved at a perturbed price, warm-started,
         which is what the coordinator inner loop actually does

Usage: python benchmarks/bench_kernel.py [--homes N] [--horizon K]
       [--seed S] [--repeat R]
"""

from __future__ import annotations

import argparse
import importlib
import time

import numpy as np

import loadsteer._kernel as kernel_pkg
from loadsteer import HomeQpSolver, NeighborhoodConfig, generate_neighborhood
from loadsteer._kernel import fallback


def _load_compiled():
    try:
        mod = importlib.import_module("loadsteer._kernel._admm")
    except ImportError:
        return None
    return mod.admm_run


def _run_workload(scenario, prices, label, impl, repeat):
    """Solve every home at prices[0] cold, then at prices[1:] warm."""
    original = kernel_pkg.admm_run
    kernel_pkg.admm_run = impl
    cold_times, warm_times = [], []
    objectives = []
    try:
        for _ in range(repeat):
            solvers = [
                HomeQpSolver(h.polyhedron, h.weights, h.desired)
                for h in scenario.homes
            ]
            t0 = time.perf_counter()
            sols = [s.solve(prices[0]) for s in solvers]
            cold_times.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            for price in prices[1:]:
                sols = [s.solve(price) for s in solvers]
            warm_times.append(time.perf_counter() - t0)
            objectives.append(sum(s.objective_value for s in sols))
    finally:
        kernel_pkg.admm_run = original
    print(
        f"  {label:<10} cold {min(cold_times) * 1e3:8.1f} ms   "
        f"warm x{len(prices) - 1} {min(warm_times) * 1e3:8.1f} ms"
    )
    return min(cold_times), min(warm_times), objectives[0]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--homes", type=int, default=40)
    ap.add_argument("--horizon", type=int, default=96)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--repeat", type=int, default=3, help="take best of R")
    args = ap.parse_args()

    compiled = _load_compiled()
    if compiled is None:
        raise SystemExit("compiled extension not importable; nothing to compare")

    cfg = NeighborhoodConfig(
        n_homes=args.homes, horizon=args.horizon, seed=args.seed
    )
    scenario = generate_neighborhood(cfg)
    rng = np.random.default_rng(args.seed)
    base = rng.uniform(cfg.price_low, cfg.price_high, size=args.horizon)
    prices = [base] + [
        np.clip(base + rng.normal(0, 0.02, size=args.horizon),
                cfg.price_low, cfg.price_high)
        for _ in range(5)
    ]

    rows = sum(h.polyhedron.matrix.shape[0] for h in scenario.homes)
    cols = sum(h.polyhedron.matrix.shape[1] for h in scenario.homes)
    print(
        f"{args.homes} homes, horizon {args.horizon}, "
        f"{rows} constraint rows / {cols} variables total, best of {args.repeat}"
    )

    c_cold, c_warm, c_obj = _run_workload(
        scenario, prices, "compiled", compiled, args.repeat
    )
    p_cold, p_warm, p_obj = _run_workload(
        scenario, prices, "python", fallback.admm_run, args.repeat
    )

    drift = abs(c_obj - p_obj) / max(1.0, abs(c_obj))
    print(f"  speedup    cold {p_cold / c_cold:8.2f}x   warm      {p_warm / c_warm:8.2f}x")
    print(f"  objective agreement: relative drift {drift:.2e}")
    if drift > 1e-9:
        raise SystemExit("backends disagree beyond polish tolerance")


if __name__ == "__main__":
    main()
