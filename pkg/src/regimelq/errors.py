"""Exception types raised across the toolkit."""


class RegimeLQError(Exception):
    """Base class for toolkit errors."""


class ConfigurationError(RegimeLQError):
    """Bad user input: malformed problem file, inconsistent arguments."""


class SpecLoadError(ConfigurationError):
    """Problem document failed to load; carries the offending field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class StructuralError(RegimeLQError):
    """A provider or generator returned something non-numeric or mis-shaped."""


class ConvexityViolationError(RegimeLQError):
    """The perturbed quadratic weight failed to be positive definite."""

    def __init__(self, time, regime, message=None):
        self.time = time
        self.regime = regime
        super().__init__(
            message
            or f"convexity-violation suspected at s={time:.6g}, regime {regime}"
        )


class FiniteTimeEscapeError(RegimeLQError):
    """Backward Riccati integration blew up before reaching t_start."""

    def __init__(self, escape_time, epsilon):
        self.escape_time = escape_time
        self.epsilon = epsilon
        super().__init__(
            f"finite-time escape at s={escape_time:.6g} (epsilon={epsilon:g})"
        )


class SimulationBlowupError(RegimeLQError):
    """Forward Euler produced a non-finite or overflowing state."""

    def __init__(self, path, node):
        self.path = path
        self.node = node
        super().__init__(f"state blow-up on path {path} at node {node}")


class BackendError(RegimeLQError):
    """Requested solver backend cannot handle the given problem."""
