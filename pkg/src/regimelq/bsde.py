"""Adjoint backward-equation solvers feeding the strategy offset.

Two backends:

* ODE: for data deterministic in (time, regime), the adjoint value is a
  deterministic function of (s, alpha(s)). Writing y(s) = h(s, alpha(s)) and
  applying the chain rule for the jump process turns the backward equation
  into D coupled linear terminal-value ODEs

      h'(s, i) + [A + B theta]^T(s, i) h(s, i)
               + sum_k lambda_ik(s) h(s, k) + f0(s, i) = 0,
      h(T, i) = g(i),

  because the jump-martingale loadings h(s, k) - h(s, i) contribute exactly
  the generator coupling once compensated (rows of the generator sum to
  zero). The Brownian loading vanishes. Solved by backward RK4.

* regression: for path-modulated inputs, backward induction where each
  conditional expectation is a least-squares projection on polynomials in
  the modulator values crossed with regime indicators.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import BackendError, ConfigurationError
from .grid import TimeGrid
from .problem import ProblemSpec
from .providers import ModulatedProvider
from .riccati import RiccatiSolution
from .sim import ScenarioSet


@dataclass
class AdjointSolution:
    backend: str                     # "ode" | "regression"
    epsilon: float
    grid: TimeGrid
    y: np.ndarray | None = None          # (N+1, D, n) ode backend
    y_paths: np.ndarray | None = None    # (P, N+1, n) regression backend
    z_paths: np.ndarray | None = None    # (P, N+1, n), last node zero
    scenarios: ScenarioSet | None = None
    node0_se: np.ndarray | None = None   # (n,) sampling error at node 0
    ydot: np.ndarray | None = None       # (N+1, D, n) ode backend rhs
    notes: list = field(default_factory=list)

    def values_on_path(self, scenarios, p):
        if self.backend == "ode":
            regs = scenarios.grid_regimes[p]
            return self.y[np.arange(self.grid.num_nodes), regs]
        return self.y_paths[p]

    def jump_increment(self, k, i_from, i_to):
        """ODE backend: adjoint jump loading h(s_k, i_to) - h(s_k, i_from)."""
        if self.backend != "ode":
            raise BackendError("jump loadings only exist for the ODE backend")
        return self.y[k, i_to] - self.y[k, i_from]


def _gain_table(theta):
    return theta.theta if hasattr(theta, "theta") else np.asarray(theta)


class _StageData:
    """Problem data at RK4 stage times; P and theta linearly interpolated."""

    def __init__(self, spec, riccati, theta_tab, grid):
        times = np.empty(2 * grid.steps + 1)
        times[0::2] = grid.nodes
        times[1::2] = 0.5 * (grid.nodes[:-1] + grid.nodes[1:])
        self.times = times
        self.A = spec.A.node_table(times)
        self.B = spec.B.node_table(times)
        self.C = spec.C.node_table(times)
        self.Dm = spec.Dm.node_table(times)
        self.lam = np.stack([spec.generator.rates_at(t) for t in times])
        self.theta = _interleave(theta_tab)
        self.P = _interleave(riccati.P)
        # [A + B theta]^T and [C + D theta]^T at every stage
        self.a_t = np.swapaxes(self.A + self.B @ self.theta, -1, -2)
        self.c_t = np.swapaxes(self.C + self.Dm @ self.theta, -1, -2)


def _interleave(table):
    out = np.empty((2 * (table.shape[0] - 1) + 1,) + table.shape[1:])
    out[0::2] = table
    out[1::2] = 0.5 * (table[:-1] + table[1:])
    return out


def solve_adjoint_ode(spec: ProblemSpec, epsilon: float,
                      riccati: RiccatiSolution, theta,
                      grid: TimeGrid) -> AdjointSolution:
    """Deterministic-coefficient reduction; backward RK4 on the coupled ODEs.

    The Brownian loading is identically zero and the jump loadings are the
    inter-regime differences of the solution table.
    """
    if spec.modulated_fields():
        raise BackendError(
            "spec contains path-modulated terms: use regression backend"
        )
    if not riccati.grid.same_mesh(grid):
        raise ConfigurationError("riccati solution lives on a different grid")
    theta_tab = _gain_table(theta)
    data = _StageData(spec, riccati, theta_tab, grid)
    sig = spec.sigma.node_table(data.times)
    rho = spec.rho.node_table(data.times)
    b_tab = spec.b.node_table(data.times)
    q_tab = spec.q.node_table(data.times)
    # f0 = (C + D theta)^T P sigma + theta^T rho + P b + q
    f0 = (
        np.einsum("kdnj,kdji,kdi->kdn", data.c_t, data.P, sig)
        + np.einsum("kdmn,kdm->kdn", data.theta, rho)
        + np.einsum("kdni,kdi->kdn", data.P, b_tab)
        + q_tab
    )

    def rhs(idx, h_val):
        coupling = np.einsum("ik,ka->ia", data.lam[idx], h_val)
        lin = np.einsum("dij,dj->di", data.a_t[idx], h_val)
        return -(lin + coupling + f0[idx])

    num = grid.num_nodes
    h_step = grid.h
    y = np.empty((num, spec.D, spec.n))
    y[-1] = spec.g
    val = spec.g.copy()
    for k in range(grid.steps, 0, -1):
        i_hi, i_mid, i_lo = 2 * k, 2 * k - 1, 2 * k - 2
        k1 = rhs(i_hi, val)
        k2 = rhs(i_mid, val - 0.5 * h_step * k1)
        k3 = rhs(i_mid, val - 0.5 * h_step * k2)
        k4 = rhs(i_lo, val - h_step * k3)
        val = val - (h_step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        y[k - 1] = val
    ydot = np.empty_like(y)
    for k in range(num):
        ydot[k] = rhs(2 * k, y[k])
    return AdjointSolution("ode", float(epsilon), grid, y=y, ydot=ydot)


# -- regression backend -------------------------------------------------------


def _basis_exponents(n_mods, degree):
    if n_mods == 0:
        return [()]
    exps = [()]
    out = []

    def rec(prefix, remaining, budget):
        if remaining == 0:
            out.append(tuple(prefix))
            return
        for j in range(budget + 1):
            rec(prefix + [j], remaining - 1, budget - j)

    rec([], n_mods, degree)
    return out


def _design_matrix(mod_vals, regimes, num_regimes, exponents):
    cols = []
    for exp in exponents:
        term = np.ones(regimes.shape[0])
        for mi, power in enumerate(exp):
            if power:
                term = term * mod_vals[mi] ** power
        for i in range(num_regimes):
            cols.append(term * (regimes == i))
    return np.stack(cols, axis=1)


def _fit_predict(design, targets):
    """Least-squares fitted values with column scaling; returns (fit, rank)."""
    scale = np.sqrt((design**2).mean(axis=0))
    scale[scale == 0] = 1.0
    coeff, _, rank, _ = np.linalg.lstsq(design / scale, targets, rcond=None)
    return (design / scale) @ coeff, rank


def solve_adjoint_regression(spec: ProblemSpec, epsilon: float,
                             riccati: RiccatiSolution, theta,
                             scenarios: ScenarioSet,
                             basis_degree: int = 2) -> AdjointSolution:
    """Least-squares Monte Carlo backward induction for modulated inputs.

    One projection per step for the value and one for the Brownian loading
    (increment-weighted residual regression). The drive contribution of each
    modulated term integrates its base profile exactly over the step with
    the modulator frozen at the left node, so integrable singularities at
    the horizon contribute their full mass.
    """
    if scenarios.count < 100:
        raise ConfigurationError("regression backend needs >= 100 scenarios")
    grid = scenarios.grid
    if not riccati.grid.same_mesh(grid):
        raise ConfigurationError("riccati solution lives on a different grid")
    theta_tab = _gain_table(theta)
    nodes = grid.nodes
    h = grid.h
    P_paths = scenarios.count
    n, d = spec.n, spec.D
    regs = scenarios.grid_regimes

    mods = []
    field_mod = {}
    for name, prov in spec.modulated_fields().items():
        key = prov.loadings_key()
        for idx, (k2, _) in enumerate(mods):
            if k2 == key:
                field_mod[name] = idx
                break
        else:
            mods.append((key, scenarios.modulator(prov)))
            field_mod[name] = len(mods) - 1
    mod_paths = [m for _, m in mods]
    exponents = _basis_exponents(len(mod_paths), basis_degree)

    a_node = np.swapaxes(
        spec.A.node_table(nodes) + spec.B.node_table(nodes) @ theta_tab, -1, -2
    )
    c_node = np.swapaxes(
        spec.C.node_table(nodes) + spec.Dm.node_table(nodes) @ theta_tab, -1, -2
    )
    karange = np.arange(grid.num_nodes)[None, :]

    # deterministic drive pieces at the nodes: theta^T rho + q (+ sigma part)
    f0_det = np.zeros((grid.num_nodes, d, n))
    tt = np.swapaxes(theta_tab, -1, -2)
    if not spec.rho.is_zero() and not spec.rho.is_modulated:
        f0_det += np.einsum("kdnm,kdm->kdn", tt, spec.rho.node_table(nodes))
    if not spec.q.is_zero() and not spec.q.is_modulated:
        f0_det += spec.q.node_table(nodes)
    if not spec.sigma.is_zero() and not spec.sigma.is_modulated:
        f0_det += np.einsum(
            "kdnj,kdji,kdi->kdn", c_node, riccati.P, spec.sigma.node_table(nodes)
        )
    if not spec.b.is_zero() and not spec.b.is_modulated:
        f0_det += np.einsum(
            "kdni,kdi->kdn", riccati.P, spec.b.node_table(nodes)
        )

    # modulated drive pieces: coefficient(s, i) node tables plus the base
    # mass and mass centroid per step (the centroid matters when the base is
    # singular at the horizon: the last step's mass sits at s ~ T - h/3)
    mod_pieces = []  # (mod_index, coeff, step_mass (N,), step_centroid (N,))
    for name, prov in spec.modulated_fields().items():
        if prov.is_zero():
            continue
        mass = np.empty(grid.steps)
        centroid = np.empty(grid.steps)
        for k in range(grid.steps):
            mass[k] = prov.base.integral(nodes[k], nodes[k + 1])
            if mass[k] != 0.0:
                centroid[k] = prov.base.first_moment(
                    nodes[k], nodes[k + 1]) / mass[k]
            else:
                centroid[k] = 0.5 * (nodes[k] + nodes[k + 1])
        centroid = np.clip(centroid, nodes[:-1], nodes[1:])
        if name == "b":
            coeff = np.einsum("kdni,i->kdn", riccati.P, prov.direction)
        elif name == "sigma":
            coeff = np.einsum(
                "kdnj,kdji,i->kdn", c_node, riccati.P, prov.direction
            )
        elif name == "q":
            coeff = np.broadcast_to(
                prov.direction, (grid.num_nodes, d, n)
            ).copy()
        else:  # rho
            coeff = np.einsum("kdnm,m->kdn", tt, prov.direction)
        mod_pieces.append((field_mod[name], coeff, mass, centroid))

    y_paths = np.empty((P_paths, grid.num_nodes, n))
    z_paths = np.zeros((P_paths, grid.num_nodes, n))
    y_paths[:, -1] = spec.g[regs[:, -1]]

    if n == 1:
        _scalar_recursion(
            spec, grid, scenarios, regs, mod_paths, mods, exponents,
            a_node, c_node, f0_det, mod_pieces, y_paths, z_paths,
            basis_degree,
        )
    else:
        _euler_recursion(
            grid, scenarios, regs, mod_paths, exponents, a_node, c_node,
            f0_det, mod_pieces, y_paths, z_paths,
        )

    notes = []
    if n > 1 and mod_paths:
        notes.append(
            "multidimensional state with modulated inputs: one-step flow "
            "transport is linearized; expect slow Monte Carlo convergence"
        )
    # node-0 sampling error: residual spread around the node-0 projection
    resid0 = _one_step_targets_spread(
        grid, scenarios, regs, a_node, c_node, f0_det, mod_pieces,
        mod_paths, y_paths,
    )
    node0_se = resid0 / np.sqrt(P_paths)

    return AdjointSolution(
        "regression", float(epsilon), grid, y_paths=y_paths, z_paths=z_paths,
        scenarios=scenarios, node0_se=node0_se, notes=notes,
    )


def _scalar_recursion(spec, grid, scenarios, regs, mod_paths, mods, exponents,
                      a_node, c_node, f0_det, mod_pieces, y_paths, z_paths,
                      basis_degree):
    """Backward induction with conditionally averaged one-step targets.

    For a scalar state the one-step transport of a basis monomial
    prod_m M_m^{j} under the dual flow of dPhi = a Phi ds + c Phi dW has a
    closed lognormal moment exp(kappa_j(regime) h) with

        kappa_j = a - c^2/2 + sum_m j_m d_m + (c + sum_m j_m c_m)^2 / 2,

    and the regime moves with the one-step transition matrix. Averaging the
    Brownian increment analytically (conditional Monte Carlo) removes the
    dominant lognormal noise: the regression then only smooths chain effects,
    and its targets stay inside the basis span.
    """
    h = grid.h
    d = spec.D
    P_paths = scenarios.count
    num_exp = len(exponents)
    cw = np.array([np.asarray(key[0]) for key, _ in mods])  # (K, D)
    cd = np.array([np.asarray(key[1]) for key, _ in mods])
    gen = spec.generator
    if gen.is_constant:
        trans_const = scipy.linalg.expm(h * gen.matrix)

    # coefficients of the current fitted value in the (exponent, regime) basis
    beta = np.zeros((num_exp, d))
    zero_exp = exponents.index(tuple([0] * len(mod_paths))) if mod_paths else 0
    beta[zero_exp] = spec.g[:, 0]
    rank_warned = False

    for k in range(grid.steps - 1, -1, -1):
        # midpoint coefficients: the gain scales like 1/eps near the horizon
        # and a left freeze would leak O((h/eps)^2) into the terminal layer
        a_i = 0.5 * (a_node[k, :, 0, 0] + a_node[k + 1, :, 0, 0])
        c_i = 0.5 * (c_node[k, :, 0, 0] + c_node[k + 1, :, 0, 0])
        trans = trans_const if gen.is_constant else scipy.linalg.expm(
            h * gen.rates_at(grid.nodes[k]))
        # transported coefficients: regime mixing then lognormal moment
        mixed = trans @ beta.T              # (D, num_exp) -> at regime alpha_k
        kappa = np.empty((num_exp, d))
        for e, exp_tup in enumerate(exponents):
            loading = c_i.copy()
            drift_sum = np.zeros(d)
            for mi, power in enumerate(exp_tup):
                if power:
                    loading = loading + power * cw[mi]
                    drift_sum = drift_sum + power * cd[mi]
            kappa[e] = a_i - 0.5 * c_i**2 + drift_sum + 0.5 * loading**2
        weights = np.exp(kappa * h)         # (num_exp, D)

        reg_k = regs[:, k]
        target = np.zeros(P_paths)
        for e, exp_tup in enumerate(exponents):
            mono = np.ones(P_paths)
            for mi, power in enumerate(exp_tup):
                if power:
                    mono = mono * mod_paths[mi][:, k] ** power
            target += mixed[reg_k, e] * weights[e, reg_k] * mono
        target = target + 0.5 * h * (f0_det[k, reg_k, 0]
                                     + f0_det[k + 1, reg_k, 0])
        # modulated drive: coefficient at the base-mass centroid (the Riccati
        # factor moves fast near the horizon for small epsilon), plus the
        # first-order within-step transport factor exp(psi (r - s_k))
        for mi, coeff, mass, centroid in mod_pieces:
            unit = tuple(
                1 if m2 == mi else 0 for m2 in range(len(mod_paths)))
            psi = kappa[exponents.index(unit)] if unit in exponents else a_i
            frac = (centroid[k] - grid.nodes[k]) / h
            c_at = (coeff[k, reg_k, 0]
                    + frac * (coeff[k + 1, reg_k, 0] - coeff[k, reg_k, 0]))
            transport = 1.0 + psi[reg_k] * (centroid[k] - grid.nodes[k])
            target = target + c_at * transport * mass[k] * mod_paths[mi][:, k]

        mvals = [m[:, k] for m in mod_paths]
        design = _design_matrix(mvals, reg_k, d, exponents)
        coeffs, fitted, rank = _fit_coefficients(design, target)
        # regimes nobody visits yet and near-constant modulator powers make
        # early designs structurally thin; only genuine collinearity among
        # informative columns is worth a warning
        occupied = int((np.abs(design) > 0).any(axis=0).sum())
        if rank < occupied and k > grid.steps // 10 and not rank_warned:
            rank_warned = True
            warnings.warn(
                "rank-deficient regression design; "
                "coefficients resolved by truncated SVD",
                stacklevel=3,
            )
        beta = coeffs.reshape(num_exp, d)
        y_paths[:, k, 0] = fitted

        # Brownian load = dW-derivative of the fitted value along the
        # modulators: each monomial prod M^j carries loading sum_m j_m c_m
        z_val = np.zeros(P_paths)
        for e, exp_tup in enumerate(exponents):
            loading = np.zeros(d)
            mono = np.ones(P_paths)
            for mi, power in enumerate(exp_tup):
                if power:
                    loading = loading + power * cw[mi]
                    mono = mono * mod_paths[mi][:, k] ** power
            if np.any(loading):
                z_val += beta[e, reg_k] * loading[reg_k] * mono
        z_paths[:, k, 0] = z_val


def _euler_recursion(grid, scenarios, regs, mod_paths, exponents, a_node,
                     c_node, f0_det, mod_pieces, y_paths, z_paths):
    """Fallback for vector states: linearized flow transport per step."""
    h = grid.h
    d = a_node.shape[1]
    for k in range(grid.steps - 1, -1, -1):
        a_k = a_node[k][regs[:, k]]
        c_k = c_node[k][regs[:, k]]
        dwk = scenarios.dW[:, k]
        y_next = y_paths[:, k + 1]
        target = (
            y_next
            + h * np.einsum("pij,pj->pi", a_k, y_next)
            + dwk[:, None] * np.einsum("pij,pj->pi", c_k, y_next)
            + 0.5 * h * (f0_det[k][regs[:, k]] + f0_det[k + 1][regs[:, k]])
        )
        for mi, coeff, mass, _centroid in mod_pieces:
            cmid = 0.5 * (coeff[k][regs[:, k]] + coeff[k + 1][regs[:, k]])
            target = target + cmid * (mass[k] * mod_paths[mi][:, k])[:, None]
        mvals = [m[:, k] for m in mod_paths]
        design = _design_matrix(mvals, regs[:, k], d, exponents)
        y_fit, _ = _fit_predict(design, target)
        y_next_fit, _ = _fit_predict(design, y_next)
        z_target = (y_next - y_next_fit) * (dwk / h)[:, None]
        z_fit, _ = _fit_predict(design, z_target)
        y_paths[:, k] = y_fit
        z_paths[:, k] = z_fit


def _one_step_targets_spread(grid, scenarios, regs, a_node, c_node, f0_det,
                             mod_pieces, mod_paths, y_paths):
    """Sampling spread of raw one-step targets at the initial node."""
    h = grid.h
    a_0 = a_node[0][regs[:, 0]]
    c_0 = c_node[0][regs[:, 0]]
    y1 = y_paths[:, 1]
    target = (
        y1
        + h * np.einsum("pij,pj->pi", a_0, y1)
        + scenarios.dW[:, 0][:, None] * np.einsum("pij,pj->pi", c_0, y1)
        + h * f0_det[0][regs[:, 0]]
    )
    for mi, coeff, mass, _centroid in mod_pieces:
        target = target + (
            coeff[0][regs[:, 0]] * (mass[0] * mod_paths[mi][:, 0])[:, None]
        )
    return np.std(target, axis=0, ddof=1)


def _fit_coefficients(design, target):
    """Column-scaled truncated-SVD least squares: (coeffs, fitted, rank)."""
    scale = np.sqrt((design**2).mean(axis=0))
    scale[scale == 0] = 1.0
    coeff, _, rank, _ = np.linalg.lstsq(design / scale, target, rcond=1e-8)
    return coeff / scale, (design / scale) @ coeff, rank


def bsde_residual(sol: AdjointSolution, spec: ProblemSpec, epsilon: float,
                  riccati: RiccatiSolution, theta, scenarios: ScenarioSet,
                  path_index: int = 0) -> float:
    """Max-norm one-step defect of the discrete solution along one scenario.

    The drift integral uses Simpson quadrature with a cubic-Hermite midpoint
    reconstruction (ODE backend) or the trapezoid rule on fitted values
    (regression backend). Jump steps: the ODE backend applies the exact jump
    loadings; the regression backend skips them (loadings not estimated).
    """
    grid = sol.grid
    if not scenarios.grid.same_mesh(grid):
        raise ConfigurationError("scenario grid mismatch")
    p = path_index
    theta_tab = _gain_table(theta)
    nodes = grid.nodes
    h = grid.h
    regs = scenarios.grid_regimes[p]
    lo, hi = scenarios.jump_ptr[p], scenarios.jump_ptr[p + 1]
    jump_steps = set(int(s) for s in scenarios.jump_step[lo:hi])
    lam_nodes = np.stack([spec.generator.rates_at(t) for t in nodes])

    a_node = np.swapaxes(
        spec.A.node_table(nodes) + spec.B.node_table(nodes) @ theta_tab, -1, -2
    )
    worst = 0.0
    if sol.backend == "ode":
        f0 = _ode_f0_nodes(spec, riccati, theta_tab, nodes)
        for k in range(grid.steps):
            i = regs[k]
            if k in jump_steps:
                defect = _jump_step_defect(
                    sol, spec, p, k, scenarios, a_node, f0, lam_nodes
                )
            else:
                g_lo = _full_drift(sol.y[k, i], a_node[k, i], f0[k, i],
                                   lam_nodes[k, i], sol.y[k])
                g_hi = _full_drift(sol.y[k + 1, i], a_node[k + 1, i],
                                   f0[k + 1, i], lam_nodes[k + 1, i],
                                   sol.y[k + 1])
                y_mid = (0.5 * (sol.y[k, i] + sol.y[k + 1, i])
                         + 0.125 * h * (sol.ydot[k, i] - sol.ydot[k + 1, i]))
                y_mid_all = (0.5 * (sol.y[k] + sol.y[k + 1])
                             + 0.125 * h * (sol.ydot[k] - sol.ydot[k + 1]))
                a_mid = 0.5 * (a_node[k, i] + a_node[k + 1, i])
                f_mid = 0.5 * (f0[k, i] + f0[k + 1, i])
                lam_mid = 0.5 * (lam_nodes[k, i] + lam_nodes[k + 1, i])
                g_mid = _full_drift(y_mid, a_mid, f_mid, lam_mid, y_mid_all)
                integral = (h / 6.0) * (g_lo + 4.0 * g_mid + g_hi)
                defect = sol.y[k, i] - sol.y[k + 1, i] - integral
            worst = max(worst, float(np.max(np.abs(defect))))
        return worst

    # regression backend: trapezoid on fitted values, jump-free steps only
    c_node = np.swapaxes(
        spec.C.node_table(nodes) + spec.Dm.node_table(nodes) @ theta_tab, -1, -2
    )
    f0p = _regression_f0_on_path(spec, riccati, theta_tab, scenarios, p, nodes,
                                 c_node)
    y = sol.y_paths[p]
    z = sol.z_paths[p]
    for k in range(grid.steps):
        if k in jump_steps:
            continue
        i = regs[k]
        f_lo = a_node[k, i] @ y[k] + c_node[k, i] @ z[k] + f0p[k]
        i1 = regs[k + 1]
        z_hi = z[k + 1] if k + 1 < grid.steps else z[k]
        f_hi = a_node[k + 1, i1] @ y[k + 1] + c_node[k + 1, i1] @ z_hi + f0p[k + 1]
        defect = (y[k] - y[k + 1] - 0.5 * h * (f_lo + f_hi)
                  + z[k] * scenarios.dW[p, k])
        worst = max(worst, float(np.max(np.abs(defect))))
    return worst


def _full_drift(y_i, a_t, f0_i, lam_row, y_all):
    """Drift plus compensated-jump contribution: a^T y + f0 + sum_k l_ik y_k."""
    return a_t @ y_i + f0_i + np.einsum("k,ka->a", lam_row, y_all)


def _ode_f0_nodes(spec, riccati, theta_tab, nodes):
    c_t = np.swapaxes(
        spec.C.node_table(nodes) + spec.Dm.node_table(nodes) @ theta_tab, -1, -2
    )
    tt = np.swapaxes(theta_tab, -1, -2)
    return (
        np.einsum("kdnj,kdji,kdi->kdn", c_t, riccati.P,
                  spec.sigma.node_table(nodes))
        + np.einsum("kdnm,kdm->kdn", tt, spec.rho.node_table(nodes))
        + np.einsum("kdni,kdi->kdn", riccati.P, spec.b.node_table(nodes))
        + spec.q.node_table(nodes)
    )


def _jump_step_defect(sol, spec, p, k, scenarios, a_node, f0, lam_nodes):
    """Segment-left drift rule plus exact jump loadings for one jump step."""
    grid = sol.grid
    nodes = grid.nodes
    regs = scenarios.grid_regimes[p]
    i = regs[k]
    t_cur = nodes[k]
    integral = np.zeros(sol.y.shape[2])
    jump_part = np.zeros_like(integral)
    lo, hi = scenarios.jump_ptr[p], scenarios.jump_ptr[p + 1]
    for j in range(lo, hi):
        if scenarios.jump_step[j] != k:
            continue
        tau = scenarios.jump_times[j]
        dt = tau - t_cur
        integral += dt * _full_drift(
            sol.y[k, i], a_node[k, i], f0[k, i], lam_nodes[k, i], sol.y[k]
        )
        target = scenarios.jump_targets[j]
        # jump loading at the node table closest from below
        jump_part += sol.y[k, target] - sol.y[k, i]
        i = target
        t_cur = tau
    integral += (nodes[k + 1] - t_cur) * _full_drift(
        sol.y[k, i], a_node[k, i], f0[k, i], lam_nodes[k, i], sol.y[k]
    )
    return sol.y[k, regs[k]] - sol.y[k + 1, regs[k + 1]] - integral + jump_part


def _regression_f0_on_path(spec, riccati, theta_tab, scenarios, p, nodes,
                           c_node):
    regs = scenarios.grid_regimes[p]
    num = nodes.size
    karange = np.arange(num)
    out = np.zeros((num, spec.n))
    tt = np.swapaxes(theta_tab, -1, -2)

    def vec(prov, coeff):
        if prov.is_zero():
            return
        if isinstance(prov, ModulatedProvider):
            m_path = scenarios.modulator(prov)[p]
            base = np.array([prov.base.value(t) for t in nodes])
            vals = m_path[:, None] * base[:, None] * prov.direction
        else:
            vals = prov.node_table(nodes)[karange, regs]
        out[:] += np.einsum("kni,ki->kn", coeff, vals)

    vec(spec.b, riccati.P[karange, regs])
    vec(spec.sigma, np.einsum(
        "knj,kji->kni", c_node[karange, regs], riccati.P[karange, regs]
    ))
    vec(spec.rho, tt[karange, regs])
    eye_stack = np.broadcast_to(np.eye(spec.n), (num, spec.n, spec.n))
    vec(spec.q, eye_stack)
    return out
