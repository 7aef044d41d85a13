"""Coefficient providers: time/regime-indexed problem data.

A provider owns one coefficient block of the problem (state matrix, control
matrix, weight, drive, ...). Deterministic kinds evaluate to a fixed array per
(time, regime); the modulated kind represents a deterministic base profile
multiplied by a regime/Brownian exponential and can only be evaluated pathwise
(the sim and bsde modules own that machinery).
"""

from __future__ import annotations

import numpy as np

from .errors import SpecLoadError, StructuralError

_DET_KINDS = ("constant", "polynomial", "table")


def _as_array(value, shape, field):
    arr = np.asarray(value, dtype=float)
    if arr.shape == () and shape != ():
        arr = np.full(shape, float(arr))
    if arr.shape != tuple(shape):
        raise SpecLoadError(field, f"expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SpecLoadError(field, "non-finite entries")
    return arr


class CoefficientProvider:
    """Base class; subclasses implement `eval_stack`."""

    kind = "abstract"
    is_modulated = False

    def __init__(self, shape, num_regimes, name=""):
        self.shape = tuple(shape)
        self.num_regimes = int(num_regimes)
        self.name = name

    def eval(self, s, i):
        return self.eval_stack(s)[i]

    def eval_stack(self, s):
        """All regimes at once: array of shape (D, *shape)."""
        raise NotImplementedError

    def node_table(self, times):
        """Evaluate on a 1-D array of times: (len(times), D, *shape)."""
        times = np.asarray(times, dtype=float)
        out = np.empty((times.size, self.num_regimes) + self.shape)
        for k, s in enumerate(times):
            out[k] = self.eval_stack(s)
        return out

    def is_zero(self):
        return False

    def payload(self):
        raise NotImplementedError


class ConstantProvider(CoefficientProvider):
    kind = "constant"

    def __init__(self, values, shape, num_regimes, name=""):
        super().__init__(shape, num_regimes, name)
        values = np.asarray(values, dtype=float)
        if values.shape == tuple(shape) or values.shape == ():
            values = np.broadcast_to(
                _as_array(values, shape, name), (num_regimes,) + self.shape
            ).copy()
        self.values = _as_array(values, (num_regimes,) + self.shape, name)

    def eval_stack(self, s):
        return self.values

    def node_table(self, times):
        times = np.asarray(times, dtype=float)
        return np.broadcast_to(
            self.values, (times.size,) + self.values.shape
        ).copy()

    def is_zero(self):
        return not np.any(self.values)

    def payload(self):
        return {"kind": "constant", "values": self.values.tolist()}


def zero_provider(shape, num_regimes, name=""):
    return ConstantProvider(np.zeros((num_regimes,) + tuple(shape)), shape, num_regimes, name)


def identity_provider(n, num_regimes, name=""):
    return ConstantProvider(
        np.broadcast_to(np.eye(n), (num_regimes, n, n)).copy(), (n, n), num_regimes, name
    )


class PolynomialProvider(CoefficientProvider):
    """sum_k coeffs[k] * s**k with per-regime coefficient arrays."""

    kind = "polynomial"

    def __init__(self, coeffs, shape, num_regimes, name=""):
        super().__init__(shape, num_regimes, name)
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.ndim == 1 + len(shape):  # regime-shared: (K, *shape)
            coeffs = np.repeat(coeffs[:, None], num_regimes, axis=1)
        self.coeffs = _as_array(
            coeffs, (coeffs.shape[0], num_regimes) + self.shape, name
        )

    def eval_stack(self, s):
        out = np.zeros((self.num_regimes,) + self.shape)
        p = 1.0
        for c in self.coeffs:
            out += c * p
            p *= s
        return out

    def is_zero(self):
        return not np.any(self.coeffs)

    def payload(self):
        return {"kind": "polynomial", "coefficients_by_power": self.coeffs.tolist()}


class TableProvider(CoefficientProvider):
    """Linear interpolation of sampled values; clamped outside the sample span."""

    kind = "table"

    def __init__(self, times, values, shape, num_regimes, name=""):
        super().__init__(shape, num_regimes, name)
        self.times = np.asarray(times, dtype=float)
        if self.times.ndim != 1 or self.times.size < 2:
            raise SpecLoadError(name, "table needs at least two sample times")
        if np.any(np.diff(self.times) <= 0):
            raise SpecLoadError(name, "table times must be strictly increasing")
        values = np.asarray(values, dtype=float)
        if values.shape == (self.times.size,) + self.shape:  # regime-shared
            values = np.repeat(values[:, None], num_regimes, axis=1)
        self.values = _as_array(
            values, (self.times.size, num_regimes) + self.shape, name
        )

    def eval_stack(self, s):
        t = self.times
        if s <= t[0]:
            return self.values[0]
        if s >= t[-1]:
            return self.values[-1]
        j = int(np.searchsorted(t, s, side="right") - 1)
        w = (s - t[j]) / (t[j + 1] - t[j])
        return (1.0 - w) * self.values[j] + w * self.values[j + 1]

    def is_zero(self):
        return not np.any(self.values)

    def payload(self):
        return {
            "kind": "table",
            "times": self.times.tolist(),
            "values_by_time": self.values.tolist(),
        }


# -- modulated terms ---------------------------------------------------------


class BaseProfile:
    """Scalar deterministic factor f(s) of a modulated term."""

    kind = "abstract"

    def value(self, s):
        raise NotImplementedError

    def integral(self, a, b):
        """Exact-or-quadrature integral of f over [a, b]."""
        # 8-point Gauss-Legendre default; subclasses override when exact.
        x, w = np.polynomial.legendre.leggauss(8)
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        return half * float(np.dot(w, [self.value(mid + half * xi) for xi in x]))

    def first_moment(self, a, b):
        """Integral of s * f(s) over [a, b]."""
        x, w = np.polynomial.legendre.leggauss(8)
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        return half * float(np.dot(
            w, [(mid + half * xi) * self.value(mid + half * xi) for xi in x]
        ))

    def payload(self):
        raise NotImplementedError


class ConstantBase(BaseProfile):
    kind = "constant"

    def __init__(self, value):
        self.c = float(value)

    def value(self, s):
        return self.c

    def integral(self, a, b):
        return self.c * (b - a)

    def first_moment(self, a, b):
        return 0.5 * self.c * (b * b - a * a)

    def payload(self):
        return {"kind": "constant", "value": self.c}


class PolynomialBase(BaseProfile):
    kind = "polynomial"

    def __init__(self, coefficients):
        self.coefficients = [float(c) for c in coefficients]

    def value(self, s):
        return sum(c * s**k for k, c in enumerate(self.coefficients))

    def integral(self, a, b):
        return sum(
            c * (b ** (k + 1) - a ** (k + 1)) / (k + 1)
            for k, c in enumerate(self.coefficients)
        )

    def first_moment(self, a, b):
        return sum(
            c * (b ** (k + 2) - a ** (k + 2)) / (k + 2)
            for k, c in enumerate(self.coefficients)
        )

    def payload(self):
        return {"kind": "polynomial", "coefficients": self.coefficients}


class PowerTimeToGoBase(BaseProfile):
    """f(s) = scale * (horizon - s)**exponent.

    Supports integrable singularities at the horizon (exponent in (-1, 0)):
    the step integral is evaluated in closed form, so the final step of a grid
    that touches the horizon contributes its exact mass.
    """

    kind = "power_time_to_go"

    def __init__(self, scale, exponent, horizon):
        self.scale = float(scale)
        self.exponent = float(exponent)
        self.horizon = float(horizon)
        if self.exponent <= -1.0:
            raise SpecLoadError("base", "exponent <= -1 is not integrable")

    def value(self, s):
        tau = self.horizon - s
        if tau <= 0.0:
            return 0.0
        return self.scale * tau**self.exponent

    def integral(self, a, b):
        p1 = self.exponent + 1.0
        ta = max(self.horizon - a, 0.0)
        tb = max(self.horizon - b, 0.0)
        return self.scale * (ta**p1 - tb**p1) / p1

    def first_moment(self, a, b):
        # int s (T-s)^p ds = T int (T-s)^p - int (T-s)^{p+1}
        p1 = self.exponent + 1.0
        p2 = self.exponent + 2.0
        ta = max(self.horizon - a, 0.0)
        tb = max(self.horizon - b, 0.0)
        return self.scale * (
            self.horizon * (ta**p1 - tb**p1) / p1 - (ta**p2 - tb**p2) / p2
        )

    def payload(self):
        return {
            "kind": "power_time_to_go",
            "scale": self.scale,
            "exponent": self.exponent,
        }


class TableBase(BaseProfile):
    kind = "table"

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise SpecLoadError("base", "times/values must be equal-length 1-D")

    def value(self, s):
        return float(np.interp(s, self.times, self.values))

    def payload(self):
        return {
            "kind": "table",
            "times": self.times.tolist(),
            "values": self.values.tolist(),
        }


def base_from_payload(doc, horizon):
    kind = doc.get("kind")
    if kind == "constant":
        return ConstantBase(doc["value"])
    if kind == "polynomial":
        return PolynomialBase(doc["coefficients"])
    if kind == "power_time_to_go":
        return PowerTimeToGoBase(doc.get("scale", 1.0), doc["exponent"], horizon)
    if kind == "table":
        return TableBase(doc["times"], doc["values"])
    raise SpecLoadError("base", f"unknown base kind {kind!r}")


class ModulatedProvider(CoefficientProvider):
    """base(s) * exp(int c(alpha) dW + int d(alpha) dr) * direction.

    `wiener_loading` c and `drift_loading` d are per-regime scalars; the
    exponential factor (the modulator) is a path functional, so this provider
    has no pointwise deterministic value. Consumers that need pathwise values
    go through `regimelq.sim.modulator_paths`.
    """

    kind = "modulated"
    is_modulated = True

    def __init__(self, base, wiener_loading, drift_loading, shape, num_regimes,
                 direction=None, name=""):
        super().__init__(shape, num_regimes, name)
        if len(shape) != 1:
            raise SpecLoadError(name, "modulated terms are vector-valued")
        self.base = base
        self.wiener_loading = _as_array(wiener_loading, (num_regimes,), name)
        self.drift_loading = _as_array(drift_loading, (num_regimes,), name)
        if direction is None:
            direction = np.ones(shape[0])
        self.direction = _as_array(direction, (shape[0],), name)

    def eval_stack(self, s):
        raise StructuralError(
            f"{self.name or 'modulated term'} is path-dependent; "
            "evaluate it along scenarios, not pointwise"
        )

    def loadings_key(self):
        return (tuple(self.wiener_loading), tuple(self.drift_loading))

    def payload(self):
        return {
            "kind": "modulated",
            "base": self.base.payload(),
            "wiener_loading": self.wiener_loading.tolist(),
            "drift_loading": self.drift_loading.tolist(),
            "direction": self.direction.tolist(),
        }


def provider_from_payload(doc, shape, num_regimes, horizon, name=""):
    if not isinstance(doc, dict) or "kind" not in doc:
        # bare numbers / nested lists read as a constant
        return ConstantProvider(doc, shape, num_regimes, name)
    kind = doc["kind"]
    if kind == "constant":
        return ConstantProvider(
            doc.get("values", doc.get("value")), shape, num_regimes, name
        )
    if kind == "polynomial":
        return PolynomialProvider(
            doc.get("coefficients_by_power", doc.get("coefficients")),
            shape, num_regimes, name,
        )
    if kind == "table":
        return TableProvider(
            doc["times"], doc.get("values_by_time", doc.get("values")),
            shape, num_regimes, name,
        )
    if kind == "modulated":
        return ModulatedProvider(
            base_from_payload(doc["base"], horizon),
            doc["wiener_loading"], doc["drift_loading"],
            shape, num_regimes, doc.get("direction"), name,
        )
    raise SpecLoadError(name, f"unknown provider kind {kind!r}")
