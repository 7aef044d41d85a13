"""Epsilon-sweep orchestration and solvability diagnostics.

One shared ScenarioSet drives every epsilon (common random numbers), so the
pairwise control distances measure the Cauchy property of the family rather
than Monte Carlo noise. The verdict is numerical evidence for open-loop
solvability: bounded control energy plus a vanishing Cauchy trend counts as
solvable, unbounded growth or a Riccati escape as not-solvable.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bsde import solve_adjoint_ode, solve_adjoint_regression
from .control import Strategy, build_theta, build_v
from .errors import ConfigurationError, FiniteTimeEscapeError, RegimeLQError
from .grid import TimeGrid
from .problem import ProblemSpec, homogenize
from .riccati import solve_perturbed, tail_integrability_flag
from .sim import (
    ScenarioSet,
    estimate_cost,
    generate_scenarios,
    simulate_closed_loop,
    simulate_open_loop,
)
from .chain import path_rng

DEFAULT_EPSILONS = (1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01)


@dataclass
class SweepReport:
    epsilons: list
    records: list                 # per-epsilon dicts (norms, values, SEs)
    cauchy_u: np.ndarray          # (E, E) pairwise control distances
    cauchy_theta: np.ndarray
    cauchy_v: np.ndarray
    verdict: str                  # solvable | not-solvable | inconclusive
    limit: Strategy | None
    t_prime: float
    grid: TimeGrid
    x0: np.ndarray
    i0: int
    escapes: dict                 # epsilon -> escape time
    cauchy_node_stride: int
    scenario_seed: int
    scenario_count: int

    def record(self, epsilon):
        for rec in self.records:
            if rec["epsilon"] == epsilon:
                return rec
        raise KeyError(epsilon)


def _pipeline(spec, x0, i0, eps, scenarios, grid, basis_degree):
    riccati = solve_perturbed(spec, eps, grid)
    theta = build_theta(riccati, eps)
    if spec.modulated_fields():
        adjoint = solve_adjoint_regression(
            spec, eps, riccati, theta, scenarios, basis_degree
        )
    else:
        adjoint = solve_adjoint_ode(spec, eps, riccati, theta, grid)
    kind, v = build_v(riccati, adjoint, spec, eps)
    strategy = Strategy(grid, eps, theta, kind, v)
    ensemble = simulate_closed_loop(spec, x0, i0, strategy, scenarios)
    cost = estimate_cost(spec, ensemble, epsilon=eps)
    v0_se = np.zeros(spec.m)
    if adjoint.backend == "regression" and eps > 0:
        # v = -(R_hat + eps I)^{-1} B^T y at the initial node; propagate the
        # node-0 sampling error through those factors
        nodes0 = grid.nodes[:1]
        b0 = spec.B.node_table(nodes0)[0, i0]
        shift = riccati.R_hat[0, i0] + eps * np.eye(spec.m)
        v0_se = np.abs(
            np.linalg.solve(shift, np.abs(b0.T) @ adjoint.node0_se)
        )
    return {
        "riccati": riccati,
        "strategy": strategy,
        "ensemble": ensemble,
        "cost": cost,
        "v0_se": v0_se,
    }


def _offset_paths(strategy, scenarios, node_idx):
    """Pathwise offset values on selected nodes, whatever the offset kind."""
    if strategy.offset_kind == "scenario":
        return strategy.v[:, node_idx, :]
    regs = scenarios.grid_regimes[:, node_idx]
    return strategy.v[node_idx][np.arange(len(node_idx))[None, :], regs]


def run_sweep(spec: ProblemSpec, x0, i0: int, epsilons, scenarios: ScenarioSet,
              grid: TimeGrid, t_prime: float, basis_degree: int = 2,
              threads: int = 1) -> SweepReport:
    """Solve/simulate the perturbed problem along a decreasing epsilon ladder.

    Records per-epsilon control energy and cost estimates, pairwise Cauchy
    distances (controls on [0, T], gains and offsets on [0, t_prime]), the
    solvability verdict and, when solvable, the extrapolated limit strategy.
    """
    epsilons = [float(e) for e in epsilons]
    if len(epsilons) < 3:
        raise ConfigurationError("epsilon ladder needs at least 3 entries")
    if any(b >= a for a, b in zip(epsilons, epsilons[1:])) or epsilons[-1] <= 0:
        raise ConfigurationError("epsilons must be strictly decreasing and > 0")
    if not grid.same_mesh(scenarios.grid):
        raise ConfigurationError("scenario grid differs from solver grid")
    if not t_prime < spec.T:
        raise ConfigurationError("t_prime must lie strictly before the horizon")
    x0 = np.asarray(x0, dtype=float).reshape(spec.n)

    num_eps = len(epsilons)
    stride = max(1, grid.steps // 250)
    node_idx = np.arange(0, grid.num_nodes, stride)
    if node_idx[-1] != grid.steps:
        node_idx = np.append(node_idx, grid.steps)
    dec_nodes = grid.nodes[node_idx]
    k_prime = grid.node_index(t_prime)
    prime_sel = node_idx <= k_prime
    full_sel = grid.nodes <= t_prime + 1e-12

    results: list = [None] * num_eps
    escapes: dict = {}

    def run_one(j):
        try:
            return _pipeline(spec, x0, i0, epsilons[j], scenarios, grid,
                             basis_degree)
        except FiniteTimeEscapeError as exc:
            return exc
        except RegimeLQError as exc:
            raise type(exc)(
                f"epsilon={epsilons[j]:g}: {exc}"
            ) from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_one, range(num_eps)))
    else:
        results = [run_one(j) for j in range(num_eps)]

    records = []
    u_dec, v_dec, thetas = [], [], []
    u_full_min = None
    v_full_last2 = {}
    for j, (eps, res) in enumerate(zip(epsilons, results)):
        if isinstance(res, FiniteTimeEscapeError):
            escapes[eps] = float(res.escape_time)
            records.append({
                "epsilon": eps, "escaped": True,
                "escape_time": float(res.escape_time),
                "control_l2": float("nan"), "control_l2_se": float("nan"),
                "value": float("nan"), "value_se": float("nan"),
            })
            u_dec.append(None)
            v_dec.append(None)
            thetas.append(None)
            continue
        cost = res["cost"]
        records.append({
            "epsilon": eps, "escaped": False,
            "control_l2": cost.control_l2,
            "control_l2_se": cost.control_l2_se,
            "value": cost.mean, "value_se": cost.std_error,
            "offset_kind": res["strategy"].offset_kind,
            "v0_se": res["v0_se"].tolist(),
        })
        u_dec.append(res["ensemble"].u_paths[:, node_idx, :].copy())
        v_dec.append(_offset_paths(res["strategy"], scenarios, node_idx))
        thetas.append(res["strategy"].theta)
        if j == num_eps - 1:
            u_full_min = res["ensemble"].u_paths.copy()
        if j >= num_eps - 2:
            v_full_last2[eps] = (res["strategy"].offset_kind,
                                 res["strategy"].v)

    cauchy_u = np.zeros((num_eps, num_eps))
    cauchy_v = np.zeros((num_eps, num_eps))
    cauchy_theta = np.zeros((num_eps, num_eps))
    for a in range(num_eps):
        for b in range(a + 1, num_eps):
            if u_dec[a] is None or u_dec[b] is None:
                cauchy_u[a, b] = cauchy_u[b, a] = float("nan")
                cauchy_v[a, b] = cauchy_v[b, a] = float("nan")
                cauchy_theta[a, b] = cauchy_theta[b, a] = float("nan")
                continue
            du = ((u_dec[a] - u_dec[b]) ** 2).sum(axis=2)
            cauchy_u[a, b] = cauchy_u[b, a] = float(
                np.mean(np.trapezoid(du, dec_nodes, axis=1))
            )
            dv = ((v_dec[a][:, prime_sel] - v_dec[b][:, prime_sel]) ** 2).sum(axis=2)
            cauchy_v[a, b] = cauchy_v[b, a] = float(
                np.mean(np.trapezoid(dv, dec_nodes[prime_sel], axis=1))
            )
            dth = ((thetas[a][full_sel] - thetas[b][full_sel]) ** 2).sum(axis=(2, 3))
            cauchy_theta[a, b] = cauchy_theta[b, a] = float(
                np.mean(np.trapezoid(dth, grid.nodes[full_sel], axis=0))
            )

    report = SweepReport(
        epsilons=epsilons, records=records, cauchy_u=cauchy_u,
        cauchy_theta=cauchy_theta, cauchy_v=cauchy_v, verdict="inconclusive",
        limit=None, t_prime=float(t_prime), grid=grid, x0=x0, i0=int(i0),
        escapes=escapes, cauchy_node_stride=stride,
        scenario_seed=scenarios.seed, scenario_count=scenarios.count,
    )
    report.verdict = solvability_verdict(report)
    if report.verdict == "solvable":
        report.limit = _build_limit(
            report, spec, thetas, v_full_last2, u_full_min, scenarios
        )
    return report


def solvability_verdict(report: SweepReport, growth_tol: float = 0.05) -> str:
    """Boundedness-plus-Cauchy evidence for open-loop solvability.

    solvable: the two smallest-epsilon control energies agree within
    growth_tol relative AND the consecutive Cauchy distances of the three
    smallest epsilons decrease. not-solvable: >= 10x energy growth across
    the ladder, or a Riccati escape. Otherwise inconclusive.
    """
    if report.escapes:
        return "not-solvable"
    norms = [rec["control_l2"] for rec in report.records]
    if len(norms) < 3:
        return "inconclusive"
    if norms[-1] >= 10.0 * max(norms[0], 1e-300) and norms[0] > 0:
        return "not-solvable"
    scale = max(norms[-1], norms[-2], 1e-300)
    bounded = abs(norms[-1] - norms[-2]) <= growth_tol * scale
    d32 = report.cauchy_u[-3, -2]
    d21 = report.cauchy_u[-2, -1]
    atol = 1e-12 * max(1.0, scale)
    cauchy_ok = d21 <= d32 + atol
    if bounded and cauchy_ok:
        return "solvable"
    return "inconclusive"


def _rational_extrapolate(f0, f1, e0, e1):
    """Entrywise limit at epsilon=0 from two solves.

    Fits f(eps) = p / (q + eps) per entry (exact for reciprocal-linear
    families, which is how feedback gains degenerate toward a weak limit)
    and falls back to plain linear extrapolation when the fit is
    ill-conditioned. Returns (value, used_rational_mask).
    """
    f0 = np.asarray(f0, dtype=float)
    f1 = np.asarray(f1, dtype=float)
    df = f0 - f1
    scale = np.abs(f0) + np.abs(f1)
    w = e1 / (e0 - e1)
    linear = f1 + (f1 - f0) * w
    with np.errstate(all="ignore"):
        q = (f1 * e1 - f0 * e0) / df
        rational = f0 * (q + e0) / q
    usable = (
        (np.abs(df) > 1e-9 * scale + 1e-300)
        & (q > 1e-3 * e1)
        & np.isfinite(rational)
        & (np.abs(rational - f1) <= 20.0 * np.abs(df) + 1e-300)
    )
    out = np.where(usable, rational, linear)
    flat = np.abs(df) <= 1e-9 * scale + 1e-300
    out = np.where(flat, f1, out)
    return out, usable


def _build_limit(report, spec, thetas, v_full_last2, u_full_min, scenarios):
    e0, e1 = report.epsilons[-2], report.epsilons[-1]
    theta_star, _ = _rational_extrapolate(thetas[-2], thetas[-1], e0, e1)
    kind0, v0 = v_full_last2[e0]
    kind1, v1 = v_full_last2[e1]
    if kind0 != kind1:
        raise ConfigurationError("offset kinds differ across epsilons")
    v_star, _ = _rational_extrapolate(v0, v1, e0, e1)

    grid = report.grid
    gain_sq = (theta_star**2).sum(axis=(1, 2, 3))
    flag = tail_integrability_flag(gain_sq, grid.nodes)
    rec1 = report.records[-1]
    se1 = np.asarray(rec1.get("v0_se", np.zeros(spec.m)))
    se0 = np.asarray(report.records[-2].get("v0_se", np.zeros(spec.m)))
    v0_se_star = np.sqrt((2.0 * se1) ** 2 + se0**2)
    return Strategy(
        grid, 0.0, theta_star, kind1, v_star,
        square_integrable=flag,
        meta={
            "source_epsilons": (e0, e1),
            "reference_u": u_full_min,
            "reference_epsilon": e1,
            "v0_se": v0_se_star,
        },
    )


def limit_strategy(report: SweepReport, spec: ProblemSpec) -> Strategy:
    """Extrapolated weak-limit strategy; requires a solvable verdict."""
    if report.verdict != "solvable":
        raise ConfigurationError(
            f"limit strategy undefined for verdict {report.verdict!r}"
        )
    if report.limit is None:
        raise ConfigurationError("report carries no limit tables")
    return report.limit


@dataclass
class FeedbackIdentityReport:
    residual: float
    residual_se: float
    cost_closed: float
    cost_closed_se: float
    cost_reference: float
    cost_reference_se: float

    @property
    def cost_gap(self):
        return abs(self.cost_closed - self.cost_reference)


def verify_feedback_identity(spec: ProblemSpec, x0, i0: int, limit: Strategy,
                             scenarios: ScenarioSet, t_prime: float,
                             u_reference=None) -> FeedbackIdentityReport:
    """Simulate the limit feedback and compare with the smallest-epsilon run.

    residual = E int_0^t' |u_closed - u_ref|^2 under common random numbers;
    the cost gap compares full-horizon cost estimates of both ensembles.
    """
    grid = scenarios.grid
    if u_reference is None:
        u_reference = limit.meta.get("reference_u")
    if u_reference is None:
        raise ConfigurationError(
            "no reference control: pass u_reference or use a sweep limit"
        )
    ens = simulate_closed_loop(spec, x0, i0, limit, scenarios)
    k_prime = grid.node_index(t_prime)
    sel = slice(0, k_prime + 1)
    du = ((ens.u_paths[:, sel] - u_reference[:, sel]) ** 2).sum(axis=2)
    per_path = np.trapezoid(du, grid.nodes[sel], axis=1)
    residual = float(np.mean(per_path))
    residual_se = float(np.std(per_path, ddof=1) / np.sqrt(len(per_path)))

    cost_closed = estimate_cost(spec, ens, epsilon=0.0)
    ref_ens = simulate_open_loop(spec, x0, i0, u_reference, scenarios)
    cost_ref = estimate_cost(spec, ref_ens, epsilon=0.0)
    return FeedbackIdentityReport(
        residual, residual_se,
        cost_closed.mean, cost_closed.std_error,
        cost_ref.mean, cost_ref.std_error,
    )


@dataclass
class ConvexityProbeReport:
    min_value: float
    min_se: float
    flagged_negative: bool
    table: list  # (value, se) per probe control


def convexity_probe(spec: ProblemSpec, t0: float, i0: int,
                    scenarios: ScenarioSet, num_controls: int,
                    pieces: int = 16, seed: int | None = None) -> ConvexityProbeReport:
    """Estimate min_u J0(t0, 0, i0; u) over random piecewise-constant probes.

    Negative values beyond 3 standard errors flag a failed convexity
    precondition. Probe controls are deterministic piecewise-constant
    functions with unit-scale Gaussian node values.
    """
    if num_controls < 10:
        raise ConfigurationError("need at least 10 probe controls")
    spec0 = homogenize(spec)
    grid = scenarios.grid
    rng = path_rng(scenarios.seed if seed is None else seed, 0x7071)
    piece_of_node = np.minimum(
        (np.arange(grid.num_nodes) * pieces) // grid.num_nodes, pieces - 1
    )
    table = []
    best = (np.inf, 0.0)
    for _ in range(num_controls):
        levels = rng.standard_normal((pieces, spec.m))
        u_nodes = levels[piece_of_node]  # (N+1, m)
        u = np.broadcast_to(
            u_nodes, (scenarios.count,) + u_nodes.shape
        ).copy()
        ens = simulate_open_loop(spec0, np.zeros(spec.n), i0, u, scenarios)
        cost = estimate_cost(spec0, ens, epsilon=0.0)
        table.append((cost.mean, cost.std_error))
        if cost.mean < best[0]:
            best = (cost.mean, cost.std_error)
    flagged = best[0] < -3.0 * best[1]
    return ConvexityProbeReport(best[0], best[1], flagged, table)


@dataclass
class ValueGapReport:
    epsilons: list
    values: list
    value_ses: list
    monotone_ok: bool
    extrapolated: float
    extrapolated_se: float


def value_gap(report: SweepReport) -> ValueGapReport:
    """Perturbed-value sequence, monotonicity check, linear extrapolation.

    The perturbed values decrease toward the true value as epsilon shrinks;
    monotonicity is asserted within pooled sampling error. The linear-in-
    epsilon extrapolation is a heuristic (no rate is guaranteed).
    """
    if report.verdict == "not-solvable":
        raise ConfigurationError("value gap undefined for not-solvable sweeps")
    vals = [rec["value"] for rec in report.records]
    ses = [rec["value_se"] for rec in report.records]
    monotone = True
    for j in range(len(vals) - 1):
        pooled = 3.0 * float(np.hypot(ses[j], ses[j + 1]))
        if vals[j + 1] > vals[j] + pooled:
            monotone = False
    e0, e1 = report.epsilons[-2], report.epsilons[-1]
    w = e1 / (e0 - e1)
    extr = vals[-1] + (vals[-1] - vals[-2]) * w
    extr_se = float(np.hypot((1 + w) * ses[-1], w * ses[-2]))
    return ValueGapReport(
        list(report.epsilons), vals, ses, monotone, float(extr), extr_se
    )
