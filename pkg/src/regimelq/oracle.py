"""Built-in benchmark problems with closed-form solutions.

All four fixtures are scalar two-regime problems whose Riccati solutions,
strategies, and optimal controls are available in closed form, which makes
them exact test oracles for every solver in the package. Stochastic closed
forms are implemented pathwise (as functions of a simulated scenario set),
so they can be compared per path, not only in expectation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import TimeGrid
from .chain import Generator
from .problem import ProblemSpec, make_spec
from .providers import ModulatedProvider, PowerTimeToGoBase
from .riccati import solve_gre, solve_perturbed, regularity_report
from .sim import ScenarioSet

_SQRT2 = float(np.sqrt(2.0))


@dataclass
class OracleSuite:
    name: str
    spec: ProblemSpec
    closed_forms: dict
    tolerances: dict = field(default_factory=dict)

    def form(self, key):
        return self.closed_forms[key]


def _two_regime_generator():
    # slow symmetric switching: every closed form below is generator-free,
    # and a calmer chain keeps the lognormal cost tails testable at desk
    # path counts (the modulator loadings grow with the regime value)
    return Generator.constant([[-0.25, 0.25], [0.25, -0.25]])


def _modulator_term(n=1):
    """exp(int sqrt(2(i+1)) dW - 2 int (i+1) dr): the fixtures' exponential."""
    return ModulatedProvider(
        base=PowerTimeToGoBase(1.0, 0.0, 1.0),
        wiener_loading=[_SQRT2, 2.0],
        drift_loading=[-2.0, -4.0],
        shape=(n,), num_regimes=2,
    )


def modulator_values(scen: ScenarioSet) -> np.ndarray:
    """Pathwise modulator M at the grid nodes, shape (P, N+1)."""
    return scen.modulator(_modulator_term())


def homogeneous_benchmark() -> OracleSuite:
    """Scalar two-regime problem with terminal cost only.

    dX = [-(i+1) X + u] ds + sqrt(2(i+1)) X dW, J = E|X(1)|^2. The naive
    feedback from the unperturbed Riccati tables is u = 0 with cost x^2,
    while steering along -x * M(s) reaches zero terminal state and zero
    cost, so the problem is open-loop but not closed-loop solvable.
    """
    spec = make_spec(
        T=1.0, n=1, m=1, generator=_two_regime_generator(),
        A=np.array([[[-1.0]], [[-2.0]]]),
        B=np.array([[[1.0]], [[1.0]]]),
        C=np.array([[[_SQRT2]], [[2.0]]]),
        G=np.array([[[1.0]], [[1.0]]]),
    )

    def ubar(scen, x):
        return (-x * modulator_values(scen))[:, :, None]

    def xbar(scen, x):
        nodes = scen.grid.nodes
        return (x * (1.0 - nodes)[None, :] * modulator_values(scen))[:, :, None]

    forms = {
        "gre_value": lambda s, i=0: 1.0,
        "optimal_cost_naive": lambda x: float(x) ** 2,
        "steering_control": ubar,
        "steering_state": xbar,
        "steering_cost": lambda x: 0.0,
    }
    return OracleSuite(
        "homogeneous", spec, forms,
        {"gre": 1e-8, "cost_rel": "3 standard errors",
         "steering_cost": "max(3 standard errors, 5e-2)"},
    )


def driven_benchmark() -> OracleSuite:
    """The homogeneous fixture plus a modulated drive b = M(s)/sqrt(1-s).

    Everything of interest has a closed form: perturbed Riccati tables,
    gains, adjoint values, offsets, controls, and the weak limit strategy.
    """
    b = ModulatedProvider(
        base=PowerTimeToGoBase(1.0, -0.5, 1.0),
        wiener_loading=[_SQRT2, 2.0],
        drift_loading=[-2.0, -4.0],
        shape=(1,), num_regimes=2,
    )
    spec = make_spec(
        T=1.0, n=1, m=1, generator=_two_regime_generator(),
        A=np.array([[[-1.0]], [[-2.0]]]),
        B=np.array([[[1.0]], [[1.0]]]),
        C=np.array([[[_SQRT2]], [[2.0]]]),
        G=np.array([[[1.0]], [[1.0]]]),
        b=b,
    )

    def p_eps(s, eps):
        return eps / (eps + 1.0 - np.asarray(s))

    def theta_eps(s, eps):
        return -1.0 / (eps + 1.0 - np.asarray(s))

    def tail_integral(s):
        return 2.0 * np.sqrt(np.maximum(1.0 - np.asarray(s), 0.0))

    def eta_eps(scen, eps):
        nodes = scen.grid.nodes
        return (p_eps(nodes, eps) * tail_integral(nodes))[None, :] * \
            modulator_values(scen)

    def v_eps(scen, eps):
        return -eta_eps(scen, eps) / eps

    def u_eps(scen, eps, x):
        return (-(x + 2.0) / (eps + 1.0)) * modulator_values(scen)

    def u_star(scen, x):
        return -(x + 2.0) * modulator_values(scen)

    def v_star(scen):
        nodes = scen.grid.nodes
        with np.errstate(divide="ignore"):
            factor = -2.0 / np.sqrt(np.maximum(1.0 - nodes, 0.0))
        return factor[None, :] * modulator_values(scen)

    forms = {
        "p_eps": p_eps,
        "theta_eps": theta_eps,
        "eta_eps": eta_eps,
        "eta_eps_node0": lambda eps: 2.0 * eps / (eps + 1.0),
        "v_eps": v_eps,
        "u_eps": u_eps,
        "control_l2": lambda eps, x: ((x + 2.0) / (eps + 1.0)) ** 2,
        "u_star": u_star,
        "theta_star": lambda s: -1.0 / (1.0 - np.asarray(s)),
        "v_star": v_star,
        "value": lambda x: 0.0,
    }
    return OracleSuite(
        "driven", spec, forms,
        {"p_eps": 1e-6, "theta_star": 1e-3, "eta_regression_rel": 0.05},
    )


def classical_reference(n: int = 1, m: int = 1) -> OracleSuite:
    """Strongly regular fixture: identity weights, trivial drift.

    The Riccati solution is the identity for all times (the terminal value
    sits at the stationary point), which the dense-grid self-oracle
    reproduces to round-off; the feedback weight stays at 1.
    """
    suite_gen = _two_regime_generator()
    spec = make_spec(
        T=1.0, n=n, m=m, generator=suite_gen,
        B=np.broadcast_to(np.eye(n, m), (2, n, m)).copy(),
        Q=np.broadcast_to(np.eye(n), (2, n, n)).copy(),
        R=np.broadcast_to(np.eye(m), (2, m, m)).copy(),
        G=np.broadcast_to(np.eye(n), (2, n, n)).copy(),
    )

    def dense_reference(steps=100_000):
        sol = solve_gre(spec, TimeGrid(0.0, spec.T, steps))
        return sol.P[0]

    forms = {
        "dense_reference": dense_reference,
        "strong_lambda": lambda: 1.0,
    }
    return OracleSuite("classical", spec, forms, {"dense_agreement": 1e-8})


def indefinite_benchmark() -> OracleSuite:
    """Negative terminal weight: dX = u ds, J = -E|X(1)|^2 + eps penalty.

    The perturbed Riccati solution -eps/(eps - (1 - s)) blows up backward
    at s = 1 - eps, so every small-epsilon solve escapes and the sweep must
    report not-solvable.
    """
    spec = make_spec(
        T=1.0, n=1, m=1, generator=_two_regime_generator(),
        B=np.array([[[1.0]], [[1.0]]]),
        G=np.array([[[-1.0]], [[-1.0]]]),
    )

    def p_eps(s, eps):
        s = np.asarray(s)
        return -eps / (eps - (1.0 - s))

    forms = {
        "p_eps": p_eps,
        "escape_time": lambda eps: 1.0 - eps,
    }
    return OracleSuite("indefinite", spec, forms, {"escape": "before 1-eps"})


def oracle_check(paths: int = 4000, steps: int = 1000, seed: int = 20240801):
    """Run every fixture against its solver; returns (name, ok, detail) rows.

    Used by the CLI oracle-check command; the full acceptance suite tests
    the same facts at the sizes and tolerances pinned there.
    """
    from .bsde import solve_adjoint_regression
    from .control import build_theta
    from .sim import estimate_cost, generate_scenarios, simulate_open_loop
    from .errors import FiniteTimeEscapeError

    rows = []

    def record(name, ok, detail):
        rows.append((name, bool(ok), detail))

    grid = TimeGrid(0.0, 1.0, steps)

    suite = homogeneous_benchmark()
    gre = solve_gre(suite.spec, grid)
    err = float(np.max(np.abs(gre.P - 1.0)))
    record("homogeneous/gre-constant", err <= 1e-8, f"max|P-1|={err:.2e}")
    reg = regularity_report(gre, suite.spec)
    record(
        "homogeneous/not-regular",
        reg.classification == "not-regular" and reg.range_residual_max >= 0.5,
        f"classification={reg.classification}, "
        f"range residual={reg.range_residual_max:.3f}",
    )
    scen = generate_scenarios(suite.spec, grid, paths, seed)
    for x in (1.0, 2.0):
        zero_u = np.zeros((paths, grid.num_nodes, 1))
        ens = simulate_open_loop(suite.spec, [x], 0, zero_u, scen)
        cost = estimate_cost(suite.spec, ens)
        ok = abs(cost.mean - x * x) <= 3 * cost.std_error
        record(f"homogeneous/naive-cost(x={x:g})", ok,
               f"J={cost.mean:.4f} vs {x * x:g} (se={cost.std_error:.4f})")
        ens = simulate_open_loop(
            suite.spec, [x], 0, suite.form("steering_control")(scen, x), scen
        )
        cost = estimate_cost(suite.spec, ens)
        ok = cost.mean <= max(3 * cost.std_error, 5e-2)
        record(f"homogeneous/steering-cost(x={x:g})", ok,
               f"J={cost.mean:.4g} (se={cost.std_error:.2g})")

    suite = driven_benchmark()
    worst = 0.0
    fine = TimeGrid(0.0, 1.0, max(steps, 2000))  # 1e-6 tolerance needs N=2000
    for eps in (1.0, 0.1, 0.01):
        sol = solve_perturbed(suite.spec, eps, fine)
        ref = suite.form("p_eps")(fine.nodes, eps)
        worst = max(worst, float(np.max(np.abs(sol.P[:, :, 0, 0] - ref[:, None]))))
    record("driven/perturbed-riccati", worst <= 1e-6, f"max err={worst:.2e}")
    eps = 1.0
    sol = solve_perturbed(suite.spec, eps, grid)
    theta = build_theta(sol, eps)
    scen = generate_scenarios(suite.spec, grid, paths, seed)
    adj = solve_adjoint_regression(suite.spec, eps, sol, theta, scen)
    eta0 = float(np.mean(adj.y_paths[:, 0, 0]))
    ref0 = suite.form("eta_eps_node0")(eps)
    ok = abs(eta0 - ref0) <= 0.05 * abs(ref0)
    record("driven/adjoint-node0", ok, f"eta(0)={eta0:.4f} vs {ref0:g}")

    suite = classical_reference()
    sol = solve_gre(suite.spec, grid)
    dense = suite.form("dense_reference")(20_000)
    gap = float(np.max(np.abs(sol.P[0] - dense)))
    record("classical/dense-agreement", gap <= 1e-8, f"|P(0) gap|={gap:.2e}")
    reg = regularity_report(sol, suite.spec)
    record(
        "classical/strongly-regular",
        reg.classification == "strongly-regular"
        and abs(reg.strong_lambda - 1.0) <= 1e-9,
        f"classification={reg.classification}, lambda={reg.strong_lambda:.6f}",
    )

    suite = indefinite_benchmark()
    ok_all, detail = True, []
    for eps in (0.2, 0.1, 0.05, 0.02):
        try:
            solve_perturbed(suite.spec, eps, grid)
            ok_all = False
            detail.append(f"eps={eps:g}: no escape")
        except FiniteTimeEscapeError as exc:
            # detection lands within two steps of the analytic pole
            good = abs(exc.escape_time - suite.form("escape_time")(eps)) \
                <= 2 * grid.h + 1e-12
            ok_all = ok_all and good
            detail.append(f"eps={eps:g}: escape at {exc.escape_time:.4f}")
    record("indefinite/escape-times", ok_all, "; ".join(detail))
    return rows
