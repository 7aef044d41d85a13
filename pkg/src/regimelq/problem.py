"""Problem specification: coefficients, weights, loading and validation.

A `ProblemSpec` bundles the controlled dynamics

    dX = [A X + B u + b] ds + [C X + D u + sigma] dW

(coefficients regime-indexed through the chain) with the quadratic cost
blocks (G, g, Q, S, R, q, rho). `Dm` is the control diffusion matrix; the
name avoids clashing with the regime count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .chain import Generator, validate_generator
from .errors import SpecLoadError
from .grid import TimeGrid
from .providers import (
    CoefficientProvider,
    ConstantProvider,
    ModulatedProvider,
    provider_from_payload,
    zero_provider,
)

SYMMETRY_TOL = 1e-10

_MATRIX_FIELDS = ("A", "B", "C", "Dm", "Q", "S", "R")
_VECTOR_FIELDS = ("b", "sigma", "q", "rho")
_SYMMETRIC_FIELDS = ("Q", "R")
_MODULATED_OK = ("b", "sigma", "q", "rho")


@dataclass
class ProblemSpec:
    T: float
    n: int
    m: int
    generator: Generator
    A: CoefficientProvider
    B: CoefficientProvider
    C: CoefficientProvider
    Dm: CoefficientProvider
    b: CoefficientProvider
    sigma: CoefficientProvider
    G: np.ndarray          # (D, n, n), symmetric per regime
    g: np.ndarray          # (D, n)
    Q: CoefficientProvider
    S: CoefficientProvider
    R: CoefficientProvider
    q: CoefficientProvider
    rho: CoefficientProvider

    @property
    def D(self) -> int:
        return self.generator.num_regimes

    def modulated_fields(self) -> dict:
        out = {}
        for name in _MODULATED_OK:
            prov = getattr(self, name)
            if prov.is_modulated:
                out[name] = prov
        return out

    def is_homogeneous(self) -> bool:
        return (
            self.b.is_zero() and self.sigma.is_zero() and self.q.is_zero()
            and self.rho.is_zero() and not np.any(self.g)
        )


def _expected_shape(field, n, m):
    return {
        "A": (n, n), "B": (n, m), "C": (n, n), "Dm": (n, m),
        "Q": (n, n), "S": (m, n), "R": (m, m),
        "b": (n,), "sigma": (n,), "q": (n,), "rho": (m,),
    }[field]


def _symmetrize(mat, field):
    """(M + M^T)/2 when the asymmetry is round-off; reject otherwise."""
    asym = np.linalg.norm(mat - np.swapaxes(mat, -1, -2))
    scale = max(np.linalg.norm(mat), 1.0)
    if asym > SYMMETRY_TOL * scale:
        raise SpecLoadError(
            field, f"asymmetry {asym:.3g} exceeds tolerance {SYMMETRY_TOL * scale:.3g}"
        )
    return 0.5 * (mat + np.swapaxes(mat, -1, -2))


def _symmetrize_provider(prov, field):
    if isinstance(prov, ConstantProvider):
        prov.values = _symmetrize(prov.values, field)
    elif hasattr(prov, "coeffs"):
        prov.coeffs = _symmetrize(prov.coeffs, field)
    elif hasattr(prov, "values"):
        prov.values = _symmetrize(prov.values, field)
    else:
        raise SpecLoadError(field, "symmetric weights must be deterministic")
    return prov


def make_spec(T, n, m, generator, *, A=None, B=None, C=None, Dm=None, b=None,
              sigma=None, G=None, g=None, Q=None, S=None, R=None, q=None,
              rho=None) -> ProblemSpec:
    """Programmatic construction; any omitted block defaults to zero."""
    d = generator.num_regimes
    if T <= 0:
        raise SpecLoadError("horizon", "horizon must be positive")

    def block(name, value):
        shape = _expected_shape(name, n, m)
        if value is None:
            return zero_provider(shape, d, name)
        if isinstance(value, CoefficientProvider):
            if value.shape != shape or value.num_regimes != d:
                raise SpecLoadError(name, "provider shape mismatch")
            if value.is_modulated and name not in _MODULATED_OK:
                raise SpecLoadError(name, "field cannot be path-modulated")
            return value
        return ConstantProvider(value, shape, d, name)

    providers = {name: block(name, v) for name, v in zip(
        _MATRIX_FIELDS + _VECTOR_FIELDS,
        (A, B, C, Dm, Q, S, R, b, sigma, q, rho))}
    for name in _SYMMETRIC_FIELDS:
        providers[name] = _symmetrize_provider(providers[name], name)

    G_arr = np.zeros((d, n, n)) if G is None else np.asarray(G, dtype=float)
    if G_arr.shape == (n, n):
        G_arr = np.broadcast_to(G_arr, (d, n, n)).copy()
    if G_arr.shape != (d, n, n):
        raise SpecLoadError("G", f"expected shape {(d, n, n)}, got {G_arr.shape}")
    G_arr = _symmetrize(G_arr, "G")
    g_arr = np.zeros((d, n)) if g is None else np.asarray(g, dtype=float)
    if g_arr.shape == (n,):
        g_arr = np.broadcast_to(g_arr, (d, n)).copy()
    if g_arr.shape != (d, n):
        raise SpecLoadError("g", f"expected shape {(d, n)}, got {g_arr.shape}")

    report = validate_generator(generator, np.linspace(0.0, T, 101))
    if not report.passed:
        raise SpecLoadError("generator", "; ".join(report.violations))

    return ProblemSpec(
        T=float(T), n=int(n), m=int(m), generator=generator,
        A=providers["A"], B=providers["B"], C=providers["C"],
        Dm=providers["Dm"], b=providers["b"], sigma=providers["sigma"],
        G=G_arr, g=g_arr, Q=providers["Q"], S=providers["S"],
        R=providers["R"], q=providers["q"], rho=providers["rho"],
    )


def load_spec(document: dict) -> ProblemSpec:
    """Build a ProblemSpec from the JSON problem-document schema."""
    try:
        dims = document["dims"]
        n, m, d = int(dims["n"]), int(dims["m"]), int(dims["regimes"])
        T = float(document["horizon"])
        gen = Generator.from_payload(document["generator"])
        coefficients = document["coefficients"]
        weights = document["weights"]
    except KeyError as exc:
        raise SpecLoadError(str(exc.args[0]), "missing field") from None
    if gen.num_regimes != d:
        raise SpecLoadError("generator", "regime count disagrees with dims")

    def prov(section, key, field):
        doc = section.get(key)
        if doc is None:
            return None
        return provider_from_payload(doc, _expected_shape(field, n, m), d, T, field)

    return make_spec(
        T, n, m, gen,
        A=prov(coefficients, "A", "A"), B=prov(coefficients, "B", "B"),
        C=prov(coefficients, "C", "C"), Dm=prov(coefficients, "D", "Dm"),
        b=prov(coefficients, "b", "b"),
        sigma=prov(coefficients, "sigma", "sigma"),
        G=np.asarray(weights["G"], dtype=float) if "G" in weights else None,
        g=np.asarray(weights["g"], dtype=float) if "g" in weights else None,
        Q=prov(weights, "Q", "Q"), S=prov(weights, "S", "S"),
        R=prov(weights, "R", "R"), q=prov(weights, "q", "q"),
        rho=prov(weights, "rho", "rho"),
    )


def load_spec_file(path) -> ProblemSpec:
    with open(path, encoding="utf-8") as fh:
        return load_spec(json.load(fh))


def render_spec(spec: ProblemSpec) -> dict:
    """Inverse of load_spec up to provider-wise numerical equality."""
    return {
        "horizon": spec.T,
        "dims": {"n": spec.n, "m": spec.m, "regimes": spec.D},
        "generator": spec.generator.payload(),
        "coefficients": {
            "A": spec.A.payload(), "B": spec.B.payload(),
            "C": spec.C.payload(), "D": spec.Dm.payload(),
            "b": spec.b.payload(), "sigma": spec.sigma.payload(),
        },
        "weights": {
            "G": spec.G.tolist(), "g": spec.g.tolist(),
            "Q": spec.Q.payload(), "S": spec.S.payload(),
            "R": spec.R.payload(), "q": spec.q.payload(),
            "rho": spec.rho.payload(),
        },
    }


def homogenize(spec: ProblemSpec) -> ProblemSpec:
    """Zero out the drive terms (b, sigma, g, q, rho); idempotent."""
    d = spec.D
    return replace(
        spec,
        b=zero_provider((spec.n,), d, "b"),
        sigma=zero_provider((spec.n,), d, "sigma"),
        g=np.zeros((d, spec.n)),
        q=zero_provider((spec.n,), d, "q"),
        rho=zero_provider((spec.m,), d, "rho"),
    )


@dataclass
class SpecValidationReport:
    passed: bool
    failures: list
    warnings: list
    flags: dict  # field -> note ("path-modulated", growth warnings, ...)


def validate_spec(spec: ProblemSpec, grid: TimeGrid) -> SpecValidationReport:
    """Finiteness sweep plus membership notes for the supported data classes.

    Deterministic providers are sampled on 1001 uniform points plus the grid
    nodes; NaN/Inf anywhere is a hard failure. Steep growth toward the
    horizon (integrable-but-not-square-integrable inputs) is a warning, not
    an error.
    """
    failures, warns = [], []
    flags = {}
    samples = np.unique(np.concatenate(
        [np.linspace(0.0, spec.T, 1001), grid.nodes]))
    for name in _MATRIX_FIELDS + _VECTOR_FIELDS:
        prov = getattr(spec, name)
        if prov.is_modulated:
            flags[name] = "path-modulated"
            if not np.all(np.isfinite(prov.wiener_loading)) or not np.all(
                np.isfinite(prov.drift_loading)
            ):
                failures.append(f"{name}: non-finite modulator loadings")
            continue
        table = prov.node_table(samples)
        if not np.all(np.isfinite(table)):
            failures.append(f"{name}: non-finite values on the sample grid")
            continue
        mags = np.sqrt((table**2).sum(axis=tuple(range(1, table.ndim))))
        tail = mags[samples > 0.95 * spec.T]
        scale = np.median(mags) if np.median(mags) > 0 else np.max(mags)
        if tail.size and scale > 0 and np.max(tail) > 100.0 * scale:
            warns.append(
                f"{name}: steep growth near the horizon; integrable inputs "
                "are fine but square-integrability is doubtful"
            )
            flags.setdefault(name, "integrability-warning")
    if not np.all(np.isfinite(spec.G)) or not np.all(np.isfinite(spec.g)):
        failures.append("G/g: non-finite entries")
    return SpecValidationReport(not failures, failures, warns, flags)
