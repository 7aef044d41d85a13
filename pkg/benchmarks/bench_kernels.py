#!/usr/bin/env python3
"""Benchmark: compiled kernel core vs numpy fallback.

Times the two hot kernels (chain sampling, SDE path stepping) on a
sweep-sized workload and checks that both backends agree numerically.

    python benchmarks/bench_kernels.py [--paths 10000] [--steps 1000]
"""

import argparse
import time

import numpy as np

import regimelq.kernels as kernels
from regimelq import TimeGrid, generate_scenarios, simulate_closed_loop
from regimelq.chain import path_rng
from regimelq.control import Strategy, build_theta, build_v
from regimelq.bsde import solve_adjoint_regression
from regimelq.oracle import driven_benchmark
from regimelq.riccati import solve_perturbed


def time_call(fn, repeats=3):
    best = float("inf")
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--paths", type=int, default=10_000)
    parser.add_argument("--steps", type=int, default=1000)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    try:
        compiled = kernels.get_backend("compiled")
    except ImportError:
        raise SystemExit("compiled kernels not built; nothing to compare")
    python = kernels.get_backend("python")

    suite = driven_benchmark()
    spec = suite.spec
    grid = TimeGrid(0.0, 1.0, args.steps)
    print(f"workload: {args.paths} paths x {args.steps} steps "
          f"(driven two-regime benchmark)\n")

    # chain sampling (a fast chain, so draw cost dominates; the per-path
    # Philox construction is shared state and not part of the kernel)
    rates = np.array([[-3.0, 3.0], [4.0, -4.0]])
    results = {}
    for name, impl in (("compiled", compiled), ("python", python)):
        best, out = float("inf"), None
        for _ in range(args.repeats):
            gens = [path_rng(7, p) for p in range(args.paths)]
            t0 = time.perf_counter()
            out = impl.chain_jumps_constant(rates, 0.0, 1.0, 0, gens, 4096)
            best = min(best, time.perf_counter() - t0)
        results[name] = (best, out)
    t_c, out_c = results["compiled"]
    t_p, out_p = results["python"]
    agree = all(np.array_equal(a, b) for a, b in zip(out_c, out_p))
    print(f"chain sampling : compiled {t_c * 1e3:8.1f} ms | "
          f"python {t_p * 1e3:8.1f} ms | speedup {t_p / t_c:5.1f}x | "
          f"bitwise agree: {agree}")
    assert agree

    # forward SDE stepping under the epsilon-feedback
    scen = generate_scenarios(spec, grid, args.paths, seed=7)
    eps = 0.1
    sol = solve_perturbed(spec, eps, grid)
    theta = build_theta(sol, eps)
    adjoint = solve_adjoint_regression(spec, eps, sol, theta, scen)
    kind, v = build_v(sol, adjoint, spec, eps)
    strat = Strategy(grid, eps, theta, kind, v)

    paths = {}
    original = kernels.simulate_paths
    try:
        for name, impl in (("compiled", compiled), ("python", python)):
            kernels.simulate_paths = impl.simulate_paths
            t, ens = time_call(
                lambda: simulate_closed_loop(spec, [1.0], 0, strat, scen),
                args.repeats,
            )
            paths[name] = (t, ens.x_paths)
    finally:
        kernels.simulate_paths = original
    t_c, x_c = paths["compiled"]
    t_p, x_p = paths["python"]
    gap = float(np.max(np.abs(x_c - x_p) / np.maximum(np.abs(x_c), 1.0)))
    print(f"SDE stepping   : compiled {t_c * 1e3:8.1f} ms | "
          f"python {t_p * 1e3:8.1f} ms | speedup {t_p / t_c:5.1f}x | "
          f"max rel gap: {gap:.2e}")
    assert gap <= 1e-12
    print("\nbackends agree; benchmark complete")


if __name__ == "__main__":
    main()
