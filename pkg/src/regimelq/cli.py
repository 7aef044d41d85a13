"""Command-line front end.

Subcommands: validate, riccati, sweep, simulate, oracle-check. Outputs are
a report.json plus CSV side files per command; identical configurations
produce byte-identical bundles. Exit codes: 0 success, 1 solver/validation
failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .bsde import solve_adjoint_ode, solve_adjoint_regression
from .control import Strategy, build_theta, build_v
from .errors import ConfigurationError, RegimeLQError
from .grid import TimeGrid
from .oracle import oracle_check
from .problem import load_spec_file, validate_spec
from .reporting import (
    append_jsonl,
    dump_json,
    fmt,
    write_ensemble_csv,
    write_riccati_csv,
    write_sweep_bundle,
)
from .riccati import regularity_report, solve_gre, solve_perturbed
from .sim import estimate_cost, generate_scenarios, simulate_closed_loop, \
    simulate_open_loop
from .sweep import DEFAULT_EPSILONS, run_sweep, value_gap


def _add_common(sub, problem=True):
    if problem:
        sub.add_argument("--problem", required=True, help="problem JSON file")
    sub.add_argument("--steps", type=int, default=2000, help="grid steps N")
    sub.add_argument("--seed", type=int, default=12345, help="scenario seed")
    sub.add_argument("--paths", type=int, default=2000,
                     help="Monte Carlo scenario count")
    sub.add_argument("--out", default="out", help="output directory")
    sub.add_argument("--threads", type=int, default=1,
                     help="parallelism budget for per-epsilon pipelines")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="regimelq",
        description="Stochastic LQ control of regime-switching systems",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("validate", help="load and check a problem file")
    _add_common(p)

    p = subs.add_parser("riccati", help="solve the coupled Riccati system")
    _add_common(p)
    p.add_argument("--eps", default="0",
                   help="comma list; 0 selects the unperturbed system")

    p = subs.add_parser("sweep", help="epsilon sweep with solvability verdict")
    _add_common(p)
    p.add_argument("--eps", default=",".join(fmt(e) for e in DEFAULT_EPSILONS))
    p.add_argument("--tprime", type=float, default=None,
                   help="strategy truncation time (default 0.9 T)")
    p.add_argument("--x0", default="1", help="comma list initial state")
    p.add_argument("--i0", type=int, default=0, help="initial regime (0-based)")

    p = subs.add_parser("simulate", help="forward simulation and cost estimate")
    _add_common(p)
    p.add_argument("--epsilon", type=float, default=None,
                   help="simulate the closed loop at this epsilon")
    p.add_argument("--zero-control", action="store_true",
                   help="simulate the uncontrolled system instead")
    p.add_argument("--x0", default="1")
    p.add_argument("--i0", type=int, default=0)
    p.add_argument("--max-export", type=int, default=64,
                   help="paths written to the ensemble CSV")

    p = subs.add_parser("oracle-check",
                        help="run the built-in closed-form fixtures")
    _add_common(p, problem=False)
    return parser


def _parse_list(text):
    return [float(tok) for tok in text.split(",") if tok.strip() != ""]


def cmd_validate(args):
    spec = load_spec_file(args.problem)
    grid = TimeGrid(0.0, spec.T, args.steps)
    report = validate_spec(spec, grid)
    os.makedirs(args.out, exist_ok=True)
    dump_json(
        {
            "passed": report.passed,
            "failures": report.failures,
            "warnings": report.warnings,
            "flags": report.flags,
            "dims": {"n": spec.n, "m": spec.m, "regimes": spec.D},
            "horizon": spec.T,
        },
        os.path.join(args.out, "report.json"),
    )
    for line in report.failures:
        print(f"FAIL {line}")
    for line in report.warnings:
        print(f"warn {line}")
    print(f"validate: {'pass' if report.passed else 'fail'} "
          f"({len(report.warnings)} warnings)")
    return 0 if report.passed else 1


def cmd_riccati(args):
    spec = load_spec_file(args.problem)
    grid = TimeGrid(0.0, spec.T, args.steps)
    os.makedirs(args.out, exist_ok=True)
    entries = []
    for eps in _parse_list(args.eps):
        sol = solve_gre(spec, grid) if eps == 0 else solve_perturbed(
            spec, eps, grid)
        name = f"riccati_eps{eps:g}.csv"
        write_riccati_csv(sol, os.path.join(args.out, name))
        reg = regularity_report(sol, spec)
        entries.append({"epsilon": eps, "csv": name,
                        "regularity": reg.as_dict()})
        print(f"eps={eps:g}: {reg.classification} -> {name}")
    dump_json({"solves": entries, "steps": args.steps},
              os.path.join(args.out, "report.json"))
    return 0


def cmd_sweep(args):
    spec = load_spec_file(args.problem)
    grid = TimeGrid(0.0, spec.T, args.steps)
    epsilons = _parse_list(args.eps)
    t_prime = args.tprime if args.tprime is not None else 0.9 * spec.T
    k_prime = min(max(int(round(t_prime / grid.h)), 1), grid.steps - 1)
    t_prime = float(grid.nodes[k_prime])
    x0 = _parse_list(args.x0)
    scen = generate_scenarios(spec, grid, args.paths, args.seed, args.i0)
    report = run_sweep(spec, x0, args.i0, epsilons, scen, grid, t_prime,
                       threads=args.threads)
    write_sweep_bundle(report, args.out)
    if report.verdict != "not-solvable":
        gap = value_gap(report)
        dump_json(
            {
                "epsilons": gap.epsilons, "values": gap.values,
                "value_ses": gap.value_ses, "monotone_ok": gap.monotone_ok,
                "extrapolated": gap.extrapolated,
                "extrapolated_se": gap.extrapolated_se,
            },
            os.path.join(args.out, "value_gap.json"),
        )
    print(f"sweep verdict: {report.verdict}")
    for rec in report.records:
        print(f"  eps={rec['epsilon']:g}: "
              f"E|u|^2={rec['control_l2']:.6g} (se {rec['control_l2_se']:.2g})")
    return 0


def cmd_simulate(args):
    spec = load_spec_file(args.problem)
    grid = TimeGrid(0.0, spec.T, args.steps)
    x0 = _parse_list(args.x0)
    scen = generate_scenarios(spec, grid, args.paths, args.seed, args.i0)
    os.makedirs(args.out, exist_ok=True)
    if args.zero_control or args.epsilon is None:
        u = np.zeros((args.paths, grid.num_nodes, spec.m))
        ens = simulate_open_loop(spec, x0, args.i0, u, scen)
        eps = 0.0
        label = "zero-control"
    else:
        eps = args.epsilon
        sol = solve_perturbed(spec, eps, grid)
        theta = build_theta(sol, eps)
        if spec.modulated_fields():
            adj = solve_adjoint_regression(spec, eps, sol, theta, scen)
        else:
            adj = solve_adjoint_ode(spec, eps, sol, theta, grid)
        kind, v = build_v(sol, adj, spec, eps)
        strat = Strategy(grid, eps, theta, kind, v)
        ens = simulate_closed_loop(spec, x0, args.i0, strat, scen)
        label = f"closed-loop eps={eps:g}"
    cost = estimate_cost(spec, ens, epsilon=eps)
    write_ensemble_csv(ens, os.path.join(args.out, "ensemble.csv"),
                       max_paths=args.max_export)
    record = {
        "control": label, "epsilon": eps, "paths": args.paths,
        "steps": args.steps, "seed": args.seed,
        "cost_mean": cost.mean, "cost_se": cost.std_error,
        "control_l2": cost.control_l2, "control_l2_se": cost.control_l2_se,
    }
    append_jsonl(record, os.path.join(args.out, "costs.jsonl"))
    dump_json(record, os.path.join(args.out, "report.json"))
    print(f"{label}: J={cost.mean:.6g} (se {cost.std_error:.3g}), "
          f"E int |u|^2 = {cost.control_l2:.6g}")
    return 0


def cmd_oracle_check(args):
    rows = oracle_check(paths=max(args.paths, 2000), steps=args.steps,
                        seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    dump_json(
        [{"check": name, "passed": ok, "detail": detail}
         for name, ok, detail in rows],
        os.path.join(args.out, "report.json"),
    )
    width = max(len(name) for name, _, _ in rows)
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
    failed = [name for name, ok, _ in rows if not ok]
    print(f"oracle-check: {len(rows) - len(failed)}/{len(rows)} passed")
    return 0 if not failed else 1


_COMMANDS = {
    "validate": cmd_validate,
    "riccati": cmd_riccati,
    "sweep": cmd_sweep,
    "simulate": cmd_simulate,
    "oracle-check": cmd_oracle_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return _COMMANDS[args.command](args)
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except RegimeLQError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
