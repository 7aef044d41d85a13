"""Continuous-time Markov chain machinery.

Generators (rate matrices), exact path simulation, counting processes and
compensated jump martingales. Constant generators are sampled by competing
exponentials through the kernel backend; time-dependent rates fall back to
Lewis-Shedler thinning against the global bound.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, StructuralError
from .grid import TimeGrid
from . import kernels

ROW_SUM_TOL = 1e-12  # per regime, scaled by D


def path_rng(seed: int, path_index: int = 0) -> np.random.Generator:
    """Counter-based per-path stream: disjoint Philox counter blocks."""
    return np.random.Generator(
        np.random.Philox(key=int(seed) & (2**64 - 1),
                         counter=int(path_index) << 128)
    )


class Generator:
    """Transition-rate matrix of the chain, possibly time-dependent.

    `rate_bound` must dominate every |diagonal| rate over the horizon; it
    drives the thinning sampler and is validated by `validate_generator`.
    """

    def __init__(self, num_regimes, rates_fn, rate_bound, kind="callable",
                 matrix=None, times=None, values=None):
        self.num_regimes = int(num_regimes)
        self._rates_fn = rates_fn
        self.rate_bound = float(rate_bound)
        self.kind = kind
        self.matrix = matrix
        self.times = times
        self.values = values

    @classmethod
    def constant(cls, matrix, rate_bound=None):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise StructuralError("generator matrix must be square")
        if rate_bound is None:
            rate_bound = float(np.max(np.abs(np.diag(matrix)))) if matrix.size else 0.0
        return cls(matrix.shape[0], lambda t: matrix, rate_bound,
                   kind="constant", matrix=matrix)

    @classmethod
    def from_table(cls, times, values, rate_bound=None):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.ndim != 3 or values.shape[1] != values.shape[2]:
            raise StructuralError("generator table must stack square matrices")
        if rate_bound is None:
            rate_bound = float(np.max(np.abs(values.diagonal(axis1=1, axis2=2))))

        def fn(t, times=times, values=values):
            if t <= times[0]:
                return values[0]
            if t >= times[-1]:
                return values[-1]
            j = int(np.searchsorted(times, t, side="right") - 1)
            w = (t - times[j]) / (times[j + 1] - times[j])
            return (1 - w) * values[j] + w * values[j + 1]

        return cls(values.shape[1], fn, rate_bound, kind="table",
                   times=times, values=values)

    def rates_at(self, t):
        lam = np.asarray(self._rates_fn(t), dtype=float)
        if lam.shape != (self.num_regimes, self.num_regimes):
            raise StructuralError(
                f"rate provider returned shape {lam.shape}, "
                f"expected ({self.num_regimes}, {self.num_regimes})"
            )
        return lam

    @property
    def is_constant(self):
        return self.kind == "constant"

    def payload(self):
        if self.kind == "constant":
            return {"kind": "constant", "matrix": self.matrix.tolist(),
                    "rate_bound": self.rate_bound}
        if self.kind == "table":
            return {"kind": "table", "times": self.times.tolist(),
                    "matrices": self.values.tolist(),
                    "rate_bound": self.rate_bound}
        raise ConfigurationError("callable generators cannot be serialized")

    @classmethod
    def from_payload(cls, doc):
        kind = doc.get("kind", "constant")
        if kind == "constant":
            return cls.constant(doc["matrix"], doc.get("rate_bound"))
        if kind == "table":
            return cls.from_table(doc["times"], doc["matrices"],
                                  doc.get("rate_bound"))
        raise ConfigurationError(f"unknown generator kind {kind!r}")


@dataclass
class GeneratorValidation:
    passed: bool
    violations: list
    warnings: list


def validate_generator(gen: Generator, sample_times) -> GeneratorValidation:
    """Check rate-matrix invariants at every sample time."""
    violations, warns = [], []
    d = gen.num_regimes
    if d < 1:
        violations.append("num_regimes must be >= 1")
    zero_offdiag = False
    for t in np.atleast_1d(np.asarray(sample_times, dtype=float)):
        lam = gen.rates_at(t)  # raises StructuralError on bad shape
        if not np.all(np.isfinite(lam)):
            raise StructuralError(f"non-finite generator entries at t={t:g}")
        off = lam[~np.eye(d, dtype=bool)]
        if np.any(off < 0):
            violations.append(f"negative off-diagonal rate at t={t:g}")
        if np.any(off == 0):
            zero_offdiag = True
        row_sums = lam.sum(axis=1)
        if np.any(np.abs(row_sums) > ROW_SUM_TOL * d):
            violations.append(
                f"row sums {row_sums} exceed tolerance at t={t:g}"
            )
        if np.any(np.diag(lam) > 0):
            violations.append(f"positive diagonal rate at t={t:g}")
        if np.max(np.abs(np.diag(lam)), initial=0.0) > gen.rate_bound + 1e-12:
            violations.append(
                f"rate_bound {gen.rate_bound:g} does not dominate "
                f"diagonal at t={t:g}"
            )
    if zero_offdiag:
        warns.append("zero off-diagonal rates: some transitions never occur")
    # de-duplicate repeated per-time messages, keep order
    violations = list(dict.fromkeys(violations))
    return GeneratorValidation(not violations, violations, warns)


@dataclass
class ChainPath:
    """Right-continuous piecewise-constant regime path with exact jumps."""

    t0: float
    t_end: float
    initial_regime: int
    jump_times: np.ndarray
    jump_targets: np.ndarray
    grid: TimeGrid | None = None
    grid_regimes: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.jump_times = np.asarray(self.jump_times, dtype=float)
        self.jump_targets = np.asarray(self.jump_targets, dtype=np.int64)
        if self.jump_times.size and np.any(np.diff(self.jump_times) <= 0):
            raise StructuralError("jump times must be strictly increasing")
        if self.grid is not None and self.grid_regimes is None:
            self.grid_regimes = self.regimes_at(self.grid.nodes)

    def regimes_at(self, times):
        times = np.asarray(times, dtype=float)
        idx = np.searchsorted(self.jump_times, times, side="right")
        regs = np.concatenate(([self.initial_regime], self.jump_targets))
        return regs[idx]

    def regime_at(self, t):
        return int(self.regimes_at(np.array([t]))[0])

    def segments(self, a=None, b=None):
        """(t_lo, t_hi, regime) pieces covering [a, b]."""
        a = self.t0 if a is None else a
        b = self.t_end if b is None else b
        cuts = [a] + [t for t in self.jump_times if a < t < b] + [b]
        return [
            (lo, hi, self.regime_at(lo)) for lo, hi in zip(cuts[:-1], cuts[1:])
        ]


def simulate_chain(gen: Generator, t0: float, i0: int, t_end: float,
                   seed: int, grid: TimeGrid | None = None) -> ChainPath:
    """Sample one chain path; a pure function of (gen, t0, i0, t_end, seed)."""
    if not t0 < t_end:
        raise ConfigurationError("need t0 < t_end")
    if not 0 <= i0 < gen.num_regimes:
        raise ConfigurationError(f"initial regime {i0} out of range")
    rng = path_rng(seed)
    if gen.is_constant:
        ptr, times, targets = kernels.chain_jumps_constant(
            np.ascontiguousarray(gen.matrix), t0, t_end, i0, [rng],
            _max_jumps(gen, t_end - t0),
        )
        jt, jk = times[: ptr[1]], targets[: ptr[1]]
    else:
        jt, jk = _thinning_jumps(gen, t0, t_end, i0, rng)
    return ChainPath(t0, t_end, i0, jt, jk, grid=grid)


def _max_jumps(gen, span):
    return int(64 + 16 * gen.rate_bound * span)


def _thinning_jumps(gen, t0, t_end, i0, rng):
    """Lewis-Shedler thinning against the global diagonal bound."""
    bound = gen.rate_bound
    if bound <= 0.0:
        lam = gen.rates_at(t0)
        if np.any(lam != 0.0):
            raise ConfigurationError("rate_bound = 0 with nonzero rates")
        return np.empty(0), np.empty(0, dtype=np.int64)
    times, targets = [], []
    i, t = i0, t0
    cap = _max_jumps(gen, t_end - t0) * 4
    for _ in range(cap):
        t = t + rng.standard_exponential() / bound
        if t >= t_end:
            break
        lam = gen.rates_at(t)
        r = -lam[i, i]
        if rng.random() * bound < r:
            u = rng.random()
            acc = 0.0
            target = -1
            for j in range(gen.num_regimes):
                if j == i:
                    continue
                acc += lam[i, j]
                if u * r < acc:
                    target = j
                    break
            if target >= 0:
                times.append(t)
                targets.append(target)
                i = target
    else:
        raise RuntimeError("thinning exceeded its candidate budget")
    return np.asarray(times), np.asarray(targets, dtype=np.int64)


def occupancy_reference(gen: Generator, t0: float, i0: int, t: float) -> np.ndarray:
    """Exact occupancy law of a constant chain: row i0 of expm((t-t0) * rates).

    Statistical oracle for `simulate_chain`; scaling-and-squaring matrix
    exponential via scipy.
    """
    if not gen.is_constant:
        raise NotImplementedError(
            "occupancy_reference supports constant generators only"
        )
    probs = scipy.linalg.expm((t - t0) * gen.matrix)[i0]
    probs = np.clip(probs, 0.0, None)
    total = probs.sum()
    if abs(total - 1.0) > 1e-10:
        raise StructuralError(f"occupancy row sums to {total}, not 1")
    return probs / total


@dataclass
class JumpMartingales:
    """Counting processes N_j, their compensators, and the differences."""

    grid: TimeGrid
    counts: np.ndarray        # (D, N+1) jumps into regime j up to each node
    compensators: np.ndarray  # (D, N+1) integrated intensities
    compensated: np.ndarray   # counts - compensators

    def increments(self):
        return np.diff(self.compensated, axis=1)


def compensated_martingales(path: ChainPath, gen: Generator,
                            grid: TimeGrid) -> JumpMartingales:
    """Per-regime counting processes minus integrated intensities.

    The compensator integral splits every grid step at the exact jump times;
    within a segment the regime is constant, so constant generators integrate
    exactly and time-dependent ones use the trapezoid rule per segment.
    """
    if path.jump_times.size:
        min_gap = np.min(np.diff(np.concatenate(
            ([path.t0], path.jump_times, [path.t_end]))))
        if min_gap < grid.h and path.jump_times.size > 1:
            warnings.warn(
                "grid coarser than the minimum inter-jump gap; "
                "compensator quadrature may be biased",
                stacklevel=2,
            )
    d = gen.num_regimes
    nodes = grid.nodes
    counts = np.zeros((d, grid.num_nodes))
    for j in range(d):
        jt = path.jump_times[path.jump_targets == j]
        counts[j] = np.searchsorted(jt, nodes, side="right")
    comp = np.zeros((d, grid.num_nodes))
    for k in range(grid.steps):
        incr = np.zeros(d)
        for lo, hi, i in path.segments(nodes[k], nodes[k + 1]):
            if gen.is_constant:
                row = gen.matrix[i]
                incr += row * (hi - lo)
            else:
                row = 0.5 * (gen.rates_at(lo)[i] + gen.rates_at(hi)[i])
                incr += row * (hi - lo)
            incr[i] -= row[i] * (hi - lo)  # exclude the diagonal self-rate
        comp[:, k + 1] = comp[:, k] + incr
    return JumpMartingales(grid, counts, comp, counts - comp)
