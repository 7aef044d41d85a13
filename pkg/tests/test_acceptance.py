"""Acceptance criteria, one test per criterion at its stated tolerance.

Run with `pytest -v tests/test_acceptance.py` to get one pass/fail line per
criterion; each test also prints a PASS line with the measured numbers
(visible with -s or on failure).
"""

import filecmp
import json
import os
import time

import numpy as np
import pytest
import scipy.linalg
import scipy.stats

from regimelq import (
    Generator,
    TimeGrid,
    estimate_cost,
    generate_scenarios,
    regularity_report,
    run_sweep,
    simulate_open_loop,
    solve_gre,
    solve_perturbed,
    verify_feedback_identity,
)
from regimelq.bsde import solve_adjoint_ode, solve_adjoint_regression
from regimelq.cli import main as cli_main
from regimelq.control import build_theta
from regimelq.oracle import driven_benchmark, homogeneous_benchmark, \
    indefinite_benchmark
from regimelq.problem import make_spec, render_spec
from regimelq.reporting import dump_json
from regimelq.sweep import DEFAULT_EPSILONS, limit_strategy

SEED = 20240801
GRID = TimeGrid(0.0, 1.0, 1000)   # h = 1e-3
GRID_2K = TimeGrid(0.0, 1.0, 2000)


@pytest.fixture(scope="module")
def driven():
    return driven_benchmark()


@pytest.fixture(scope="module")
def acceptance_sweep(driven):
    """Shared full-ladder sweep: 10^4 scenarios, h = 1e-3, default ladder."""
    scen = generate_scenarios(driven.spec, GRID, 10_000, seed=SEED)
    start = time.perf_counter()
    report = run_sweep(driven.spec, [1.0], 0, DEFAULT_EPSILONS, scen, GRID,
                       0.9)
    elapsed = time.perf_counter() - start
    return driven, scen, report, elapsed


def test_c1_perturbed_riccati_exactness(driven):
    start = time.perf_counter()
    worst = 0.0
    for eps in (1.0, 0.1, 0.01):
        sol = solve_perturbed(driven.spec, eps, GRID_2K)
        ref = driven.form("p_eps")(GRID_2K.nodes, eps)
        worst = max(worst, float(np.max(np.abs(sol.P[:, :, 0, 0]
                                               - ref[:, None]))))
    elapsed = time.perf_counter() - start
    assert worst <= 1e-6, f"max node error {worst:.3e}"
    assert elapsed < 1.0, f"runtime {elapsed:.2f}s"
    print(f"PASS criterion 1: max |P_eps error| = {worst:.2e}, "
          f"runtime {elapsed:.2f}s")


def test_c2_gre_and_regularity(driven):
    start = time.perf_counter()
    sol = solve_gre(driven.spec, GRID_2K)
    err = float(np.max(np.abs(sol.P - 1.0)))
    report = regularity_report(sol, driven.spec)
    elapsed = time.perf_counter() - start
    assert err <= 1e-8
    assert report.classification == "not-regular"
    assert report.range_residual_max >= 0.5
    assert elapsed < 1.0, f"runtime {elapsed:.2f}s"
    print(f"PASS criterion 2: |P-1| = {err:.2e}, {report.classification}, "
          f"range residual {report.range_residual_max:.2f}, {elapsed:.2f}s")


def test_c3_control_norm_law(acceptance_sweep):
    suite, _, report, elapsed = acceptance_sweep
    lines = []
    for rec in report.records:
        eps = rec["epsilon"]
        target = suite.form("control_l2")(eps, 1.0)
        gap = abs(rec["control_l2"] - target)
        assert gap <= 3 * rec["control_l2_se"], (
            f"eps={eps}: {rec['control_l2']:.4f} vs {target:.4f} "
            f"(se {rec['control_l2_se']:.4f})"
        )
        assert rec["control_l2"] <= 9.0 + 3 * rec["control_l2_se"]
        lines.append(f"eps={eps:g}:{rec['control_l2']:.3f}")
    assert elapsed < 120.0, f"ladder runtime {elapsed:.1f}s"
    print(f"PASS criterion 3: {' '.join(lines)}; runtime {elapsed:.1f}s")


def test_c4_optimal_cost_reproduction():
    suite = homogeneous_benchmark()
    batches, per_batch = 3, 20_000
    for x in (1.0, 2.0):
        per_path = []
        for b in range(batches):
            scen = generate_scenarios(suite.spec, GRID, per_batch, seed=SEED,
                                      path_offset=b * per_batch)
            u = np.zeros((per_batch, GRID.num_nodes, 1))
            ens = simulate_open_loop(suite.spec, [x], 0, u, scen)
            per_path.append(estimate_cost(suite.spec, ens).per_path)
        per_path = np.concatenate(per_path)
        j_hat = per_path.mean()
        se = per_path.std(ddof=1) / np.sqrt(per_path.size)
        assert abs(j_hat - x * x) <= 3 * se, (
            f"x={x}: J={j_hat:.4f} vs {x * x} (se {se:.4f})"
        )

        scen = generate_scenarios(suite.spec, GRID, per_batch, seed=SEED)
        ubar = suite.form("steering_control")(scen, x)
        ens = simulate_open_loop(suite.spec, [x], 0, ubar, scen)
        cost = estimate_cost(suite.spec, ens)
        assert cost.mean <= max(3 * cost.std_error, 5e-2), (
            f"x={x}: J(steering)={cost.mean:.4f}"
        )
    print(f"PASS criterion 4: J(0)~x^2 within 3se at {batches * per_batch} "
          f"paths; steering cost {cost.mean:.2e} <= 5e-2")


def test_c5_weak_closed_loop_limit(acceptance_sweep):
    suite, scen, report, _ = acceptance_sweep
    lim = limit_strategy(report, suite.spec)
    sel = GRID.nodes <= 0.9 + 1e-12
    ref = suite.form("theta_star")(GRID.nodes[sel])
    gain_err = float(np.max(np.abs(lim.theta[sel, :, 0, 0] - ref[:, None])))
    assert gain_err <= 1e-3, f"gain error {gain_err:.2e}"

    v0 = float(lim.v[:, 0, 0].mean())
    band = 3 * float(lim.meta["v0_se"][0])
    assert abs(v0 + 2.0) <= band, f"v*(0)={v0:.4f}, band {band:.4f}"

    fb = verify_feedback_identity(suite.spec, [1.0], 0, lim, scen, 0.9)
    threshold = max(3 * fb.residual_se, 10 * DEFAULT_EPSILONS[-1] ** 2)
    assert fb.residual <= threshold, (
        f"residual {fb.residual:.3e} vs {threshold:.3e}"
    )
    print(f"PASS criterion 5: gain err {gain_err:.1e}, v*(0)={v0:.4f} "
          f"(band {band:.4f}), residual {fb.residual:.2e} <= {threshold:.2e}")


def test_c6_adjoint_cross_check(driven):
    scen = generate_scenarios(driven.spec, GRID, 10_000, seed=SEED)
    worst = 0.0
    for eps in (1.0, 0.1):
        sol = solve_perturbed(driven.spec, eps, GRID)
        theta = build_theta(sol, eps)
        adj = solve_adjoint_regression(driven.spec, eps, sol, theta, scen)
        est = float(adj.y_paths[:, 0, 0].mean())
        ref = 2 * eps / (eps + 1)
        rel = abs(est - ref) / ref
        worst = max(worst, rel)
        assert rel <= 0.05, f"eps={eps}: eta(0)={est:.4f} vs {ref:.4f}"

    homog = homogeneous_benchmark()
    sol = solve_perturbed(homog.spec, 0.5, GRID)
    theta = build_theta(sol, 0.5)
    adj = solve_adjoint_ode(homog.spec, 0.5, sol, theta, GRID)
    assert np.max(np.abs(adj.y)) == 0.0
    print(f"PASS criterion 6: eta(0) worst rel err {worst:.2%} <= 5%; "
          f"homogeneous adjoint identically zero")


def test_c7_anti_convex_negative_control():
    suite = indefinite_benchmark()
    scen = generate_scenarios(suite.spec, GRID, 500, seed=SEED)
    report = run_sweep(suite.spec, [1.0], 0, DEFAULT_EPSILONS, scen, GRID, 0.9)
    assert report.verdict == "not-solvable"
    details = []
    for eps in DEFAULT_EPSILONS:
        if eps > 0.2:
            continue
        assert eps in report.escapes, f"eps={eps}: no escape recorded"
        t_esc = report.escapes[eps]
        assert abs(t_esc - (1.0 - eps)) <= 2 * GRID.h, (
            f"eps={eps}: escape at {t_esc:.4f}"
        )
        details.append(f"{eps:g}@{t_esc:.3f}")
    print(f"PASS criterion 7: not-solvable, escapes {' '.join(details)}")


def test_c8_statistical_infrastructure():
    gen = Generator.constant([[-1.0, 1.0], [1.0, -1.0]])
    spec = make_spec(1.0, 1, 1, gen, G=np.ones((2, 1, 1)))
    grid = TimeGrid(0.0, 1.0, 20)
    count = 100_000
    scen = generate_scenarios(spec, grid, count, seed=SEED)

    # chain occupancy: chi-square against the matrix-exponential law
    k_half = grid.node_index(0.5)
    observed = np.bincount(scen.grid_regimes[:, k_half], minlength=2)
    expected = count * scipy.linalg.expm(0.5 * gen.matrix)[0]
    chi2 = float(np.sum((observed - expected) ** 2 / expected))
    crit = scipy.stats.chi2.ppf(0.99, df=1)
    assert chi2 <= crit, f"chi2 {chi2:.2f} > {crit:.2f}"

    # compensated jump martingales: zero mean at every grid node
    nj = np.diff(scen.jump_ptr)
    seg_per_path = nj + 1
    total = int(seg_per_path.sum())
    path_of_seg = np.repeat(np.arange(count), seg_per_path)
    seg_ptr = np.concatenate(([0], np.cumsum(seg_per_path)))
    starts = np.zeros(total)
    regimes_seg = np.zeros(total, dtype=np.int64)
    nonfirst = np.ones(total, dtype=bool)
    nonfirst[seg_ptr[:-1]] = False
    starts[nonfirst] = scen.jump_times
    regimes_seg[nonfirst] = scen.jump_targets
    ends_template = np.empty(total)
    nonlast = np.ones(total, dtype=bool)
    nonlast[seg_ptr[1:] - 1] = False
    worst_z = 0.0
    for t in grid.nodes[1:]:
        ends = np.full(total, t)
        ends[nonlast] = scen.jump_times
        dt = np.clip(np.minimum(ends, t) - np.minimum(starts, t), 0.0, None)
        dwell = np.zeros((count, 2))
        np.add.at(dwell, (path_of_seg, regimes_seg), dt)
        comp = dwell @ gen.matrix - dwell * np.diag(gen.matrix)
        counts_t = np.zeros((count, 2))
        inside = scen.jump_times <= t + 1e-15
        np.add.at(counts_t,
                  (np.repeat(np.arange(count), nj)[inside],
                   scen.jump_targets[inside]), 1.0)
        mart = counts_t - comp
        for j in range(2):
            se = mart[:, j].std(ddof=1) / np.sqrt(count)
            z = abs(mart[:, j].mean()) / se
            worst_z = max(worst_z, z)
    assert worst_z <= 3.0, f"martingale mean z {worst_z:.2f}"
    del ends_template

    # Brownian terminal variance
    w_end = scen.dW.sum(axis=1)
    var = float(w_end.var(ddof=1))
    se = var * np.sqrt(2.0 / (count - 1))
    assert abs(var - 1.0) <= 3 * se
    print(f"PASS criterion 8: chi2 {chi2:.2f} <= {crit:.2f}, "
          f"martingale worst z {worst_z:.2f}, Var W(1) = {var:.4f}")


def test_c9_byte_identical_sweeps(tmp_path):
    problem = tmp_path / "driven.json"
    dump_json(render_spec(driven_benchmark().spec), problem)
    args = ["sweep", "--problem", str(problem), "--eps", "0.05,0.02,0.01",
            "--steps", "1000", "--paths", "400", "--seed", str(SEED)]
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli_main(args + ["--out", out_a]) == 0
    assert cli_main(args + ["--out", out_b]) == 0
    names = sorted(os.listdir(out_a))
    assert names == sorted(os.listdir(out_b))
    for name in names:
        assert filecmp.cmp(os.path.join(out_a, name),
                           os.path.join(out_b, name), shallow=False), name
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["verdict"] == "solvable"
    print(f"PASS criterion 9: {len(names)} bundle files byte-identical")
