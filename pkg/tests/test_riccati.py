import numpy as np
import pytest

from regimelq import Generator, TimeGrid, pinv, regularity_report, \
    solve_gre, solve_perturbed
from regimelq.errors import FiniteTimeEscapeError
from regimelq.problem import make_spec

GEN = Generator.constant([[-1.0, 1.0], [1.0, -1.0]])


def scalar_spec(**kw):
    base = dict(G=np.ones((2, 1, 1)), B=np.ones((2, 1, 1)))
    base.update(kw)
    return make_spec(1.0, 1, 1, GEN, **base)


# -- pseudo-inverse ----------------------------------------------------------


def test_pinv_zero_convention():
    assert pinv(np.array([[0.0]]))[0, 0] == 0.0


def test_pinv_scalar():
    assert np.isclose(pinv(np.array([[2.0]]))[0, 0], 0.5)


def test_pinv_diagonal():
    out = pinv(np.diag([4.0, 0.0]))
    assert np.allclose(out, np.diag([0.25, 0.0]))


def test_pinv_penrose_identities():
    rng = np.random.default_rng(42)
    for rank in range(1, 6):
        left = rng.standard_normal((5, rank))
        right = rng.standard_normal((rank, 5))
        mat = left @ right
        mp = pinv(mat)
        scale = np.linalg.norm(mat)
        assert np.allclose(mat @ mp @ mat, mat, atol=1e-8 * scale)
        assert np.allclose(mp @ mat @ mp, mp, atol=1e-8 * max(1, scale))
        assert np.allclose((mat @ mp).T, mat @ mp, atol=1e-8)
        assert np.allclose((mp @ mat).T, mp @ mat, atol=1e-8)


# -- perturbed system --------------------------------------------------------


def test_perturbed_closed_form(driven_suite, grid_1k):
    for eps in (1.0, 0.1, 0.01):
        sol = solve_perturbed(driven_suite.spec, eps, grid_1k)
        ref = driven_suite.form("p_eps")(grid_1k.nodes, eps)
        err = np.max(np.abs(sol.P[:, :, 0, 0] - ref[:, None]))
        assert err <= 1e-6, f"eps={eps}: {err}"
        # terminal condition exact, blocks consistent
        assert np.array_equal(sol.P[-1], driven_suite.spec.G)
        assert np.allclose(sol.S_hat[:, :, 0, 0], sol.P[:, :, 0, 0])
        assert np.allclose(sol.R_hat, 0.0)


def test_zero_problem_stays_at_identity():
    spec = make_spec(1.0, 2, 1, GEN, G=np.eye(2))
    sol = solve_perturbed(spec, 0.3, TimeGrid(0.0, 1.0, 300))
    assert np.allclose(sol.P, np.eye(2), atol=1e-12)


def test_scalar_terminal_control_limit():
    # dX = u ds, G = 1, R = 1: P(s) = (1+eps)/((1+eps) + (1-s))
    spec = scalar_spec(R=np.ones((2, 1, 1)))
    grid = TimeGrid(0.0, 1.0, 1000)
    sol = solve_perturbed(spec, 1e-6, grid)
    assert abs(sol.P[0, 0, 0, 0] - 0.5) <= 1e-4
    sol0 = solve_gre(spec, grid)
    assert abs(sol0.P[0, 0, 0, 0] - 0.5) <= 1e-6


def test_gre_constant_solution(homogeneous_suite, grid_1k):
    sol = solve_gre(homogeneous_suite.spec, grid_1k)
    assert np.max(np.abs(sol.P - 1.0)) <= 1e-8


def test_refinement_order(driven_suite):
    errs = []
    for steps in (250, 500):
        grid = TimeGrid(0.0, 1.0, steps)
        sol = solve_perturbed(driven_suite.spec, 0.1, grid)
        ref = driven_suite.form("p_eps")(grid.nodes, 0.1)
        errs.append(np.max(np.abs(sol.P[:, :, 0, 0] - ref[:, None])))
    order = np.log2(errs[0] / errs[1])
    assert order >= 3.5, f"observed order {order:.2f}"


def test_monotone_epsilon_limit(driven_suite, grid_1k):
    tables = [
        solve_perturbed(driven_suite.spec, eps, grid_1k).P[:-1, 0, 0, 0]
        for eps in (1.0, 0.1, 0.01, 0.001)
    ]
    for hi, lo in zip(tables, tables[1:]):
        assert np.all(lo <= hi + 1e-12)
    assert np.all(tables[-1][grid_1k.nodes[:-1] < 0.9] < 0.02)


def test_strongly_regular_perturbation_gap(classical_suite):
    grid = TimeGrid(0.0, 1.0, 1000)
    base = solve_gre(classical_suite.spec, grid)
    for eps in (0.1, 0.01):
        sol = solve_perturbed(classical_suite.spec, eps, grid)
        gap = np.max(np.abs(sol.P - base.P))
        assert gap <= 2 * eps, f"eps={eps}: gap {gap}"


def test_escape_detection(indefinite_suite):
    grid = TimeGrid(0.0, 1.0, 2000)
    with pytest.raises(FiniteTimeEscapeError) as err:
        solve_perturbed(indefinite_suite.spec, 0.1, grid)
    assert abs(err.value.escape_time - 0.9) <= 2 * grid.h


# -- regularity classification ----------------------------------------------


def test_not_regular_when_range_fails(driven_suite, grid_1k):
    sol = solve_gre(driven_suite.spec, grid_1k)
    report = regularity_report(sol, driven_suite.spec)
    assert report.classification == "not-regular"
    assert not report.range_inclusion_ok
    assert report.range_residual_max >= 0.5


def test_strongly_regular_classical(classical_suite, grid_1k):
    sol = solve_gre(classical_suite.spec, grid_1k)
    report = regularity_report(sol, classical_suite.spec)
    assert report.classification == "strongly-regular"
    assert np.isclose(report.strong_lambda, 1.0)
    assert report.l2_flag == "finite"


def test_regular_but_not_strong_zero_operators():
    spec = make_spec(1.0, 1, 1, GEN, G=np.ones((2, 1, 1)))  # B = Dm = S = 0
    sol = solve_gre(spec, TimeGrid(0.0, 1.0, 200))
    report = regularity_report(sol, spec)
    assert report.classification == "regular"
    assert report.strong_lambda == 0.0
    assert report.range_inclusion_ok and report.psd_ok
