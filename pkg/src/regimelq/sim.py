"""Scenario generation, forward simulation, and Monte Carlo cost estimation.

A ScenarioSet realizes the driving noise once: chain paths with exact jump
records, Brownian grid increments, and Brownian-bridge splits of the
increments at the jump times. The same set is reused across every epsilon
(common random numbers), which is what makes the sweep's pairwise control
distances meaningful.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .chain import path_rng, _thinning_jumps
from .errors import ConfigurationError, SimulationBlowupError
from .grid import TimeGrid
from .problem import ProblemSpec
from .providers import ModulatedProvider


@dataclass
class ScenarioSet:
    """Reproducible ensemble of coupled (chain, Brownian) drivers."""

    seed: int
    count: int
    grid: TimeGrid
    initial_regime: int
    grid_regimes: np.ndarray   # (P, N+1) int64, right-continuous
    jump_ptr: np.ndarray       # (P+1,) int64 into the flat jump arrays
    jump_step: np.ndarray      # (J,) step index containing each jump
    jump_times: np.ndarray     # (J,)
    jump_targets: np.ndarray   # (J,) int64
    jump_dw: np.ndarray        # (J,) Brownian increment from segment start
    dW: np.ndarray             # (P, N) grid increments, variance h
    _modulators: dict = field(default_factory=dict, repr=False)

    @property
    def num_steps(self):
        return self.grid.steps

    def brownian_at_nodes(self):
        out = np.zeros((self.count, self.grid.num_nodes))
        np.cumsum(self.dW, axis=1, out=out[:, 1:])
        return out

    def modulator(self, provider: ModulatedProvider) -> np.ndarray:
        """Pathwise modulator values at the grid nodes, cached by loadings."""
        key = provider.loadings_key()
        if key not in self._modulators:
            cw = np.ascontiguousarray(provider.wiener_loading[None, :])
            cd = np.ascontiguousarray(provider.drift_loading[None, :])
            m = kernels.modulator_paths(
                self.grid.nodes, self.grid_regimes, self.dW, self.jump_ptr,
                self.jump_step, self.jump_times, self.jump_targets,
                self.jump_dw, cw, cd,
            )
            self._modulators[key] = np.asarray(m)[:, :, 0]
        return self._modulators[key]


def generate_scenarios(spec: ProblemSpec, grid: TimeGrid, count: int,
                       seed: int, i0: int = 0,
                       path_offset: int = 0) -> ScenarioSet:
    """Simulate `count` coupled (chain, Brownian) paths from regime i0.

    Per-path draws come from disjoint counter blocks of one Philox family,
    in the fixed order: chain jumps, then the N grid normals, then one
    bridge normal per jump. Identical arguments give bit-identical sets,
    and `path_offset` shifts the path indices so large ensembles can be
    produced in memory-bounded batches whose union matches a single call.
    """
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    gen = spec.generator
    if not 0 <= i0 < gen.num_regimes:
        raise ConfigurationError(f"initial regime {i0} out of range")
    nodes = grid.nodes
    h = grid.h
    num_steps = grid.steps
    rngs = [path_rng(seed, path_offset + p) for p in range(count)]

    if gen.is_constant:
        max_jumps = int(64 + 16 * gen.rate_bound * (grid.t_end - grid.t_start))
        jump_ptr, jump_times, jump_targets = kernels.chain_jumps_constant(
            np.ascontiguousarray(gen.matrix, dtype=float),
            grid.t_start, grid.t_end, i0, rngs, max_jumps,
        )
    else:
        ptr = np.zeros(count + 1, dtype=np.int64)
        times_list, targets_list = [], []
        for p in range(count):
            jt, jk = _thinning_jumps(gen, grid.t_start, grid.t_end, i0, rngs[p])
            times_list.append(jt)
            targets_list.append(jk)
            ptr[p + 1] = ptr[p] + jt.size
        jump_ptr = ptr
        jump_times = (np.concatenate(times_list) if times_list else np.empty(0))
        jump_targets = (np.concatenate(targets_list) if targets_list
                        else np.empty(0, dtype=np.int64))

    # step index: jumps in (s_k, s_{k+1}] belong to step k
    if jump_times.size:
        jump_step = np.ceil(
            (jump_times - grid.t_start) / h - 1e-12
        ).astype(np.int64) - 1
        np.clip(jump_step, 0, num_steps - 1, out=jump_step)
    else:
        jump_step = np.empty(0, dtype=np.int64)

    grid_regimes = np.empty((count, grid.num_nodes), dtype=np.int64)
    regs_seed = np.int64(i0)
    for p in range(count):
        lo, hi = jump_ptr[p], jump_ptr[p + 1]
        jt = jump_times[lo:hi]
        regs = np.concatenate(([regs_seed], jump_targets[lo:hi]))
        grid_regimes[p] = regs[np.searchsorted(jt, nodes, side="right")]

    dW = np.empty((count, num_steps))
    jump_dw = np.zeros(jump_times.size)
    sqrt_h = np.sqrt(h)
    for p in range(count):
        g = rngs[p]
        dW[p] = g.standard_normal(num_steps) * sqrt_h
        lo, hi = jump_ptr[p], jump_ptr[p + 1]
        j = lo
        while j < hi:
            k = jump_step[j]
            t_cur = nodes[k]
            t_hi = nodes[k + 1]
            rem = dW[p, k]
            while j < hi and jump_step[j] == k:
                tau = jump_times[j]
                span = t_hi - t_cur
                frac = (tau - t_cur) / span
                var = (tau - t_cur) * (t_hi - tau) / span
                draw = rem * frac + np.sqrt(max(var, 0.0)) * g.standard_normal()
                jump_dw[j] = draw
                rem -= draw
                t_cur = tau
                j += 1

    return ScenarioSet(
        seed=int(seed), count=int(count), grid=grid, initial_regime=int(i0),
        grid_regimes=grid_regimes, jump_ptr=np.asarray(jump_ptr, dtype=np.int64),
        jump_step=jump_step, jump_times=jump_times,
        jump_targets=np.asarray(jump_targets, dtype=np.int64),
        jump_dw=jump_dw, dW=dW,
    )


@dataclass
class StateEnsemble:
    x_paths: np.ndarray   # (P, N+1, n)
    u_paths: np.ndarray   # (P, N+1, m)
    spec: ProblemSpec
    scenarios: ScenarioSet
    control: str
    stop_node: int        # last node actually integrated to


class _KernelTables:
    """Node tables of the dynamics coefficients in kernel layout."""

    def __init__(self, spec: ProblemSpec, grid: TimeGrid):
        nodes = grid.nodes
        c = np.ascontiguousarray
        self.A = c(spec.A.node_table(nodes))
        self.B = c(spec.B.node_table(nodes))
        self.C = c(spec.C.node_table(nodes))
        self.Dm = c(spec.Dm.node_table(nodes))
        num, d = len(nodes), spec.D
        mods = []

        def register(prov):
            if not isinstance(prov, ModulatedProvider):
                return -1, None
            key = prov.loadings_key()
            for idx, (k, _) in enumerate(mods):
                if k == key:
                    return idx, prov
            mods.append((key, prov))
            return len(mods) - 1, prov

        self.b_mod, b_prov = register(spec.b)
        self.s_mod, s_prov = register(spec.sigma)
        self.b_det = (np.zeros((num, d, spec.n)) if b_prov is not None
                      else c(spec.b.node_table(nodes)))
        self.sig_det = (np.zeros((num, d, spec.n)) if s_prov is not None
                        else c(spec.sigma.node_table(nodes)))
        self.b_base = (np.array([b_prov.base.value(t) for t in nodes])
                       if b_prov is not None else np.zeros(num))
        self.b_dir = (c(b_prov.direction) if b_prov is not None
                      else np.zeros(spec.n))
        self.s_base = (np.array([s_prov.base.value(t) for t in nodes])
                       if s_prov is not None else np.zeros(num))
        self.s_dir = (c(s_prov.direction) if s_prov is not None
                      else np.zeros(spec.n))
        if mods:
            self.mod_cw = c(np.stack([np.asarray(k[0][0]) for k in mods]))
            self.mod_cd = c(np.stack([np.asarray(k[0][1]) for k in mods]))
        else:
            self.mod_cw = np.zeros((0, d))
            self.mod_cd = np.zeros((0, d))


def _run_kernel(spec, x0, scenarios, mode, u_in=None, theta=None, v_tab=None,
                v_scn=None, stop_node=-1, control_label=""):
    grid = scenarios.grid
    tabs = _KernelTables(spec, grid)
    num, d = grid.num_nodes, spec.D
    n, m = spec.n, spec.m
    c = np.ascontiguousarray
    empty3 = np.zeros((1, 1, 1))
    empty4 = np.zeros((1, 1, 1, 1))
    x0 = np.asarray(x0, dtype=float).reshape(n)
    try:
        X, U, _ = kernels.simulate_paths(
            grid.nodes, scenarios.grid_regimes, scenarios.dW,
            scenarios.jump_ptr, scenarios.jump_step, scenarios.jump_times,
            scenarios.jump_targets, scenarios.jump_dw,
            tabs.A, tabs.B, tabs.C, tabs.Dm, tabs.b_det, tabs.sig_det,
            tabs.mod_cw, tabs.mod_cd,
            tabs.b_mod, tabs.b_base, tabs.b_dir,
            tabs.s_mod, tabs.s_base, tabs.s_dir,
            mode,
            c(u_in) if u_in is not None else empty3,
            c(theta) if theta is not None else empty4,
            c(v_tab) if v_tab is not None else empty3,
            c(v_scn) if v_scn is not None else empty3,
            x0, stop_node,
        )
    except kernels.KernelBlowup as exc:
        raise SimulationBlowupError(exc.path, exc.node) from None
    stop = grid.steps if stop_node < 0 else min(stop_node, grid.steps)
    return StateEnsemble(np.asarray(X), np.asarray(U), spec, scenarios,
                         control_label, stop)


def simulate_closed_loop(spec: ProblemSpec, x0, i0: int, strategy,
                         scenarios: ScenarioSet,
                         stop_time: float | None = None) -> StateEnsemble:
    """Euler-Maruyama under the feedback u = theta(s, regime) x + v.

    Controls are frozen at each step's left node; the dynamics switch regime
    at exact jump times within the step.
    """
    grid = scenarios.grid
    if not strategy.grid.same_mesh(grid):
        raise ConfigurationError("strategy and scenarios use different grids")
    if i0 != scenarios.initial_regime:
        raise ConfigurationError(
            f"scenarios were generated from regime {scenarios.initial_regime}"
        )
    eps = strategy.epsilon
    if eps and eps > 0 and grid.h > eps / 10 + 1e-15:
        warnings.warn(
            f"step size h={grid.h:g} exceeds epsilon/10; the feedback gain "
            f"scales like 1/epsilon near the horizon. Suggested steps: "
            f"N >= {int(np.ceil(10 * (grid.t_end - grid.t_start) / eps))}",
            stacklevel=2,
        )
    stop = -1 if stop_time is None else grid.node_index(stop_time)
    if strategy.offset_kind == "table":
        return _run_kernel(
            spec, x0, scenarios, kernels.MODE_CLOSED_TABLE,
            theta=strategy.theta, v_tab=strategy.v, stop_node=stop,
            control_label=f"closed-loop(eps={eps:g})",
        )
    if strategy.v.shape[0] != scenarios.count:
        raise ConfigurationError("per-scenario offset does not match count")
    return _run_kernel(
        spec, x0, scenarios, kernels.MODE_CLOSED_SCENARIO,
        theta=strategy.theta, v_scn=strategy.v, stop_node=stop,
        control_label=f"closed-loop(eps={eps:g})",
    )


def simulate_open_loop(spec: ProblemSpec, x0, i0: int, u_process,
                       scenarios: ScenarioSet,
                       stop_time: float | None = None) -> StateEnsemble:
    """Euler-Maruyama under an exogenous control array (P, N+1, m)."""
    if i0 != scenarios.initial_regime:
        raise ConfigurationError(
            f"scenarios were generated from regime {scenarios.initial_regime}"
        )
    u_process = np.asarray(u_process, dtype=float)
    expected = (scenarios.count, scenarios.grid.num_nodes, spec.m)
    if u_process.shape != expected:
        raise ConfigurationError(
            f"control array shape {u_process.shape}, expected {expected}"
        )
    stop = -1 if stop_time is None else scenarios.grid.node_index(stop_time)
    return _run_kernel(spec, x0, scenarios, kernels.MODE_OPEN, u_in=u_process,
                       stop_node=stop, control_label="open-loop")


@dataclass
class CostEstimate:
    mean: float
    std_error: float
    per_path: np.ndarray
    epsilon: float
    control_l2: float
    control_l2_se: float


def _gather_nodes(table, regimes):
    # table (N+1, D, ...) gathered along per-path regimes (P, N+1)
    return table[np.arange(table.shape[0])[None, :], regimes]


def _pathwise_vector(spec, prov, scenarios, nodes, node_slice):
    """Pathwise values (P, K, dim) of a possibly modulated vector provider."""
    if isinstance(prov, ModulatedProvider):
        m_paths = scenarios.modulator(prov)[:, node_slice]
        base = np.array([prov.base.value(t) for t in nodes])
        return m_paths[:, :, None] * base[None, :, None] * prov.direction
    table = prov.node_table(nodes)  # (K, D, dim)
    return _gather_nodes(table, scenarios.grid_regimes[:, node_slice])


def estimate_cost(spec: ProblemSpec, ensemble: StateEnsemble,
                  epsilon: float = 0.0, include_terminal: bool = True,
                  stop_time: float | None = None) -> CostEstimate:
    """Per-path trapezoid quadrature of the quadratic running cost.

    Adds the terminal quadratic-plus-linear term at the last integrated node
    and, when epsilon > 0, the control-energy penalty. `control_l2` (the
    plain control energy estimate) is always reported.
    """
    scen = ensemble.scenarios
    grid = scen.grid
    stop = ensemble.stop_node
    if stop_time is not None:
        stop = min(stop, grid.node_index(stop_time))
    sl = slice(0, stop + 1)
    nodes = grid.nodes[sl]
    X = ensemble.x_paths[:, sl]
    U = ensemble.u_paths[:, sl]
    regs = scen.grid_regimes[:, sl]

    integrand = np.zeros(X.shape[:2])
    if not spec.Q.is_zero():
        Qg = _gather_nodes(spec.Q.node_table(nodes), regs)
        integrand += np.einsum("pkij,pki,pkj->pk", Qg, X, X)
    if not spec.S.is_zero():
        Sg = _gather_nodes(spec.S.node_table(nodes), regs)
        integrand += 2.0 * np.einsum("pkij,pkj,pki->pk", Sg, X, U)
    if not spec.R.is_zero():
        Rg = _gather_nodes(spec.R.node_table(nodes), regs)
        integrand += np.einsum("pkij,pki,pkj->pk", Rg, U, U)
    if not spec.q.is_zero():
        qv = _pathwise_vector(spec, spec.q, scen, nodes, sl)
        integrand += 2.0 * np.einsum("pki,pki->pk", qv, X)
    if not spec.rho.is_zero():
        rv = _pathwise_vector(spec, spec.rho, scen, nodes, sl)
        integrand += 2.0 * np.einsum("pki,pki->pk", rv, U)

    per_path = np.trapezoid(integrand, nodes, axis=1)
    if include_terminal:
        xT = X[:, -1]
        regT = regs[:, -1]
        per_path = per_path + np.einsum(
            "pij,pi,pj->p", spec.G[regT], xT, xT
        ) + 2.0 * np.einsum("pi,pi->p", spec.g[regT], xT)

    energy = np.trapezoid(np.einsum("pki,pki->pk", U, U), nodes, axis=1)
    if epsilon > 0:
        per_path = per_path + epsilon * energy

    count = per_path.shape[0]
    mean = float(np.mean(per_path))
    se = float(np.std(per_path, ddof=1) / np.sqrt(count)) if count > 1 else 0.0
    e_mean = float(np.mean(energy))
    e_se = float(np.std(energy, ddof=1) / np.sqrt(count)) if count > 1 else 0.0
    return CostEstimate(mean, se, per_path, float(epsilon), e_mean, e_se)
