"""Exception types shared across the package."""


class SpinxferError(Exception):
    """Base class for all package-specific errors."""


class SpecError(SpinxferError):
    """A chain or lattice specification is malformed or inconsistent."""


class ConvergenceError(SpinxferError):
    """An iterative procedure failed to reach its target within its budget."""


class DegenerateSecantError(ConvergenceError):
    """Two secant support points have indistinguishable measured values."""


class CostEvaluationError(SpinxferError):
    """A cost evaluation raised; carries the optimizer trace gathered so far."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class ResolutionError(SpinxferError):
    """A time grid is too coarse to resolve the requested pulses."""


class InvariantError(SpinxferError):
    """A physical invariant (normalization, positivity, rate bounds) is violated."""


class ConfigError(SpinxferError):
    """An experiment configuration failed validation."""
