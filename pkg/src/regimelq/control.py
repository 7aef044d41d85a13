"""Feedback strategy assembly from Riccati and adjoint solutions."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .grid import TimeGrid
from .problem import ProblemSpec
from .providers import ModulatedProvider
from .riccati import RiccatiSolution, pinv


@dataclass
class Strategy:
    """Affine feedback u = theta(s, regime) x + v.

    `theta` is a per-regime per-node gain table. The offset is either a
    deterministic table (kind "table") or per-scenario arrays (kind
    "scenario") when the problem carries path-modulated inputs.
    epsilon == 0 marks a limit strategy, whose gain may blow up at the
    horizon end (`square_integrable` records the tail diagnosis).
    """

    grid: TimeGrid
    epsilon: float
    theta: np.ndarray              # (N+1, D, m, n)
    offset_kind: str               # "table" | "scenario"
    v: np.ndarray                  # (N+1, D, m) or (P, N+1, m)
    square_integrable: str = "finite"
    meta: dict = field(default_factory=dict, repr=False)

    def finite_before(self, t_prime):
        sel = self.grid.nodes <= t_prime + 1e-12
        return bool(np.all(np.isfinite(self.theta[sel])))


def _shifted_inverse(r_hat, epsilon):
    """(R_hat + eps I)^{-1} per node/regime; pinv fallback on bad pivots."""
    m = r_hat.shape[-1]
    shifted = r_hat + epsilon * np.eye(m)
    flat = shifted.reshape(-1, m, m)
    out = np.empty_like(flat)
    fallback = False
    for idx, mat in enumerate(flat):
        try:
            c = np.linalg.cholesky(mat)
            ident = np.eye(m)
            y = np.linalg.solve(c, ident)
            out[idx] = np.linalg.solve(c.T, y)
        except np.linalg.LinAlgError:
            fallback = True
            out[idx] = pinv(mat)
    if fallback:
        warnings.warn(
            "shifted control weight not positive definite somewhere; "
            "fell back to the pseudo-inverse",
            stacklevel=3,
        )
    return out.reshape(shifted.shape)


def build_theta(riccati: RiccatiSolution, epsilon: float,
                regularity=None) -> np.ndarray:
    """Gain table theta = -(R_hat + eps I)^{-1} S_hat (pseudo-inverse at 0).

    At epsilon == 0 the caller must supply a RegularityReport (or its
    classification string) establishing regularity.
    """
    if epsilon > 0:
        inv = _shifted_inverse(riccati.R_hat, epsilon)
        return -(inv @ riccati.S_hat)
    label = getattr(regularity, "classification", regularity)
    if label not in ("regular", "strongly-regular"):
        raise ConfigurationError(
            "gain at epsilon=0 requires a regular solution "
            f"(classification: {label!r})"
        )
    num, d, m, n = riccati.S_hat.shape
    out = np.empty((num, d, m, n))
    for k in range(num):
        for i in range(d):
            out[k, i] = -(pinv(riccati.R_hat[k, i]) @ riccati.S_hat[k, i])
    return out


def build_v(riccati: RiccatiSolution, adjoint, spec: ProblemSpec,
            epsilon: float):
    """Offset v = -(R_hat + eps I)^{-1} rho_hat.

    rho_hat collects B^T y + D^T z + D^T P sigma + rho; its kind follows the
    adjoint backend (deterministic table for the ODE backend, per-scenario
    arrays for regression). Returns (offset_kind, v).
    """
    grid = riccati.grid
    if not adjoint.grid.same_mesh(grid):
        raise ConfigurationError("adjoint and Riccati grids disagree")
    if abs(adjoint.epsilon - epsilon) > 1e-14:
        raise ConfigurationError("adjoint was solved for a different epsilon")
    nodes = grid.nodes
    inv = _shifted_inverse(riccati.R_hat, epsilon)  # (N+1, D, m, m)
    b_tab = spec.B.node_table(nodes)
    d_tab = spec.Dm.node_table(nodes)
    bt = np.swapaxes(b_tab, -1, -2)
    dt = np.swapaxes(d_tab, -1, -2)

    if adjoint.backend == "ode":
        sig = spec.sigma.node_table(nodes)
        rho = spec.rho.node_table(nodes)
        rho_hat = (
            np.einsum("kdmn,kdn->kdm", bt, adjoint.y)
            + np.einsum("kdmn,kdnj,kdj->kdm", dt, riccati.P, sig)
            + rho
        )
        return "table", -np.einsum("kdmj,kdj->kdm", inv, rho_hat)

    scen = adjoint.scenarios
    regs = scen.grid_regimes
    if not spec.Dm.is_zero():
        warnings.warn(
            "offset uses regression estimates of the Brownian load; "
            "treat it as low-confidence when the control enters the diffusion",
            stacklevel=2,
        )
    karange = np.arange(grid.num_nodes)[None, :]
    bt_g = bt[karange, regs]          # (P, N+1, m, n)
    rho_hat = np.einsum("pkmn,pkn->pkm", bt_g, adjoint.y_paths)
    if not spec.Dm.is_zero():
        dt_g = dt[karange, regs]
        p_g = riccati.P[karange, regs]
        rho_hat += np.einsum("pkmn,pkn->pkm", dt_g, adjoint.z_paths)
        if isinstance(spec.sigma, ModulatedProvider):
            sig_p = _modulated_values(spec.sigma, scen, nodes)
        else:
            sig_p = spec.sigma.node_table(nodes)[karange, regs]
        rho_hat += np.einsum(
            "pkmn,pknj,pkj->pkm", dt_g, p_g, sig_p
        )
    if not spec.rho.is_zero():
        if isinstance(spec.rho, ModulatedProvider):
            rho_hat += _modulated_values(spec.rho, scen, nodes)
        else:
            rho_hat += spec.rho.node_table(nodes)[karange, regs]
    inv_g = inv[karange, regs]
    return "scenario", -np.einsum("pkmj,pkj->pkm", inv_g, rho_hat)


def _modulated_values(prov, scen, nodes):
    base = np.array([prov.base.value(t) for t in nodes])
    return scen.modulator(prov)[:, :, None] * base[None, :, None] * prov.direction


def build_strategy(spec: ProblemSpec, riccati: RiccatiSolution, adjoint,
                   epsilon: float, regularity=None) -> Strategy:
    theta = build_theta(riccati, epsilon, regularity)
    kind, v = build_v(riccati, adjoint, spec, epsilon)
    return Strategy(riccati.grid, float(epsilon), theta, kind, v)
