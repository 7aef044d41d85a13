import numpy as np
import pytest

from regimelq import (
    Generator,
    TimeGrid,
    bsde_residual,
    generate_scenarios,
    solve_adjoint_ode,
    solve_adjoint_regression,
    solve_gre,
    solve_perturbed,
)
from regimelq.control import build_theta
from regimelq.errors import BackendError, ConfigurationError
from regimelq.problem import make_spec

GEN = Generator.constant([[-1.0, 1.0], [1.0, -1.0]])


def test_ode_backend_homogeneous_is_zero(homogeneous_suite, grid_200):
    sol = solve_perturbed(homogeneous_suite.spec, 0.5, grid_200)
    theta = build_theta(sol, 0.5)
    adj = solve_adjoint_ode(homogeneous_suite.spec, 0.5, sol, theta, grid_200)
    assert np.max(np.abs(adj.y)) == 0.0
    assert adj.backend == "ode"


def test_ode_backend_constant_drive(grid_200):
    # all operators zero, G = I, b = 1: value is the remaining horizon
    spec = make_spec(1.0, 1, 1, GEN, G=np.ones((2, 1, 1)), b=np.ones((2, 1)))
    sol = solve_gre(spec, grid_200)
    theta = build_theta(sol, 0.0, regularity="regular")
    adj = solve_adjoint_ode(spec, 0.0, sol, theta, grid_200)
    ref = (1.0 - grid_200.nodes)[:, None, None]
    assert np.max(np.abs(adj.y - ref)) < 1e-12
    assert np.max(np.abs(adj.ydot + 1.0)) < 1e-12


def test_ode_backend_shifted_terminal(grid_200):
    spec = make_spec(1.0, 1, 1, GEN, G=np.ones((2, 1, 1)), b=np.ones((2, 1)),
                     g=np.ones((2, 1)))
    sol = solve_gre(spec, grid_200)
    theta = build_theta(sol, 0.0, regularity="regular")
    adj = solve_adjoint_ode(spec, 0.0, sol, theta, grid_200)
    ref = (2.0 - grid_200.nodes)[:, None, None]
    assert np.max(np.abs(adj.y - ref)) < 1e-12


def test_ode_backend_regime_independence(grid_200):
    # regime-independent data: the generator coupling cancels row-wise
    spec = make_spec(1.0, 1, 1, GEN, A=np.full((2, 1, 1), -0.5),
                     G=np.ones((2, 1, 1)), b=np.ones((2, 1)),
                     q=np.full((2, 1), 0.3))
    sol = solve_gre(spec, grid_200)
    theta = build_theta(sol, 0.0, regularity="regular")
    adj = solve_adjoint_ode(spec, 0.0, sol, theta, grid_200)
    assert np.max(np.abs(adj.y[:, 0] - adj.y[:, 1])) < 1e-12


def test_ode_backend_rejects_modulated(driven_suite, grid_200):
    sol = solve_perturbed(driven_suite.spec, 1.0, grid_200)
    theta = build_theta(sol, 1.0)
    with pytest.raises(BackendError, match="regression"):
        solve_adjoint_ode(driven_suite.spec, 1.0, sol, theta, grid_200)


def test_regression_needs_enough_scenarios(driven_suite, grid_200):
    sol = solve_perturbed(driven_suite.spec, 1.0, grid_200)
    theta = build_theta(sol, 1.0)
    scen = generate_scenarios(driven_suite.spec, grid_200, 50, seed=1)
    with pytest.raises(ConfigurationError):
        solve_adjoint_regression(driven_suite.spec, 1.0, sol, theta, scen)


def test_regression_node0_closed_form(driven_suite, grid_1k,
                                      driven_scenarios_small):
    scen = driven_scenarios_small
    for eps in (1.0, 0.1):
        sol = solve_perturbed(driven_suite.spec, eps, grid_1k)
        theta = build_theta(sol, eps)
        adj = solve_adjoint_regression(driven_suite.spec, eps, sol, theta, scen)
        est = adj.y_paths[:, 0, 0].mean()
        ref = driven_suite.form("eta_eps_node0")(eps)
        assert abs(est - ref) <= 0.05 * abs(ref), f"eps={eps}"


def test_regression_pathwise_closed_form(driven_suite, grid_1k,
                                         driven_scenarios_small):
    scen = driven_scenarios_small
    eps = 0.1
    sol = solve_perturbed(driven_suite.spec, eps, grid_1k)
    theta = build_theta(sol, eps)
    adj = solve_adjoint_regression(driven_suite.spec, eps, sol, theta, scen)
    k = grid_1k.node_index(0.5)
    ref = driven_suite.form("eta_eps")(scen, eps)[:, k]
    est = adj.y_paths[:, k, 0]
    rel = np.abs(est - ref) / np.maximum(np.abs(ref), 1e-12)
    assert np.quantile(rel, 0.9) <= 0.10


def test_regression_brownian_load(driven_suite, grid_1k,
                                  driven_scenarios_small):
    # closed form: z = sqrt(2 alpha) * eta
    scen = driven_scenarios_small
    eps = 0.5
    sol = solve_perturbed(driven_suite.spec, eps, grid_1k)
    theta = build_theta(sol, eps)
    adj = solve_adjoint_regression(driven_suite.spec, eps, sol, theta, scen)
    k = grid_1k.node_index(0.4)
    load = np.sqrt(2.0 * (scen.grid_regimes[:, k] + 1.0))
    ref = load * driven_suite.form("eta_eps")(scen, eps)[:, k]
    rel = np.abs(adj.z_paths[:, k, 0] - ref) / np.maximum(np.abs(ref), 1e-12)
    assert np.median(rel) <= 0.05


def test_regression_matches_ode_on_deterministic(grid_200):
    spec = make_spec(1.0, 1, 1, GEN,
                     A=np.array([[[-1.0]], [[-2.0]]]),
                     B=np.ones((2, 1, 1)), R=np.ones((2, 1, 1)),
                     G=np.ones((2, 1, 1)), b=np.array([[0.5], [1.5]]))
    eps = 0.2
    sol = solve_perturbed(spec, eps, grid_200)
    theta = build_theta(sol, eps)
    ode = solve_adjoint_ode(spec, eps, sol, theta, grid_200)
    scen = generate_scenarios(spec, grid_200, 4000, seed=9)
    reg = solve_adjoint_regression(spec, eps, sol, theta, scen)
    # compare pathwise against the table evaluated along each path
    regs = scen.grid_regimes
    karange = np.arange(grid_200.num_nodes)
    ref = ode.y[karange[None, :], regs][:, :, 0]
    err = np.abs(reg.y_paths[:, :, 0] - ref)
    se = 3.0 * max(float(reg.node0_se[0]), 1e-6)
    assert err[:, 0].max() <= max(se, 5e-3)
    assert np.median(err) <= 5e-3


def test_regression_homogeneous_near_zero(homogeneous_suite, grid_200):
    sol = solve_perturbed(homogeneous_suite.spec, 0.5, grid_200)
    theta = build_theta(sol, 0.5)
    scen = generate_scenarios(homogeneous_suite.spec, grid_200, 500, seed=3)
    adj = solve_adjoint_regression(
        homogeneous_suite.spec, 0.5, sol, theta, scen)
    assert np.max(np.abs(adj.y_paths)) <= 1e-12


# -- a posteriori residual ----------------------------------------------------


def _curved_spec():
    # absorbing chain keeps the refinement study free of jump steps
    gen = Generator.constant(np.zeros((2, 2)))
    return make_spec(1.0, 1, 1, gen, B=np.ones((2, 1, 1)),
                     R=np.ones((2, 1, 1)), Q=np.ones((2, 1, 1)),
                     G=2 * np.ones((2, 1, 1)), b=np.ones((2, 1)))


def test_residual_zero_on_homogeneous(homogeneous_suite, grid_200):
    sol = solve_perturbed(homogeneous_suite.spec, 0.5, grid_200)
    theta = build_theta(sol, 0.5)
    adj = solve_adjoint_ode(homogeneous_suite.spec, 0.5, sol, theta, grid_200)
    scen = generate_scenarios(homogeneous_suite.spec, grid_200, 8, seed=4)
    res = bsde_residual(adj, homogeneous_suite.spec, 0.5, sol, theta, scen, 0)
    assert res <= 1e-14


def test_residual_refinement_order():
    spec = _curved_spec()
    res = []
    for steps in (100, 200):
        grid = TimeGrid(0.0, 1.0, steps)
        sol = solve_gre(spec, grid)
        theta = build_theta(sol, 0.0, regularity="strongly-regular")
        adj = solve_adjoint_ode(spec, 0.0, sol, theta, grid)
        scen = generate_scenarios(spec, grid, 4, seed=5)
        res.append(bsde_residual(adj, spec, 0.0, sol, theta, scen, 0))
    assert res[0] / res[1] >= 10.0, f"ratio {res[0] / res[1]:.1f}"


def test_residual_regression_decreases_with_scenarios(driven_suite):
    grid = TimeGrid(0.0, 1.0, 250)
    eps = 0.5
    sol = solve_perturbed(driven_suite.spec, eps, grid)
    theta = build_theta(sol, eps)
    values = []
    for count in (500, 2000, 8000):
        scen = generate_scenarios(driven_suite.spec, grid, count, seed=6)
        adj = solve_adjoint_regression(driven_suite.spec, eps, sol, theta, scen)
        worst = max(
            bsde_residual(adj, driven_suite.spec, eps, sol, theta, scen, p)
            for p in range(3)
        )
        values.append(worst)
    assert values[2] <= values[0]
