"""Exception hierarchy shared by all modules."""


class PerihomError(Exception):
    """Base class for toolkit errors."""


class ValidationError(PerihomError, ValueError):
    """Input data violates a structural assumption (e.g. a degenerate kernel)."""


class ArgumentError(PerihomError, ValueError):
    """An argument is outside the supported range or inconsistent with others."""


class AccuracyError(PerihomError):
    """A quadrature or truncation error estimate exceeds its tolerance."""

    def __init__(self, message, estimate=None, required=None):
        super().__init__(message)
        self.estimate = estimate
        self.required = required


class SolvabilityError(PerihomError):
    """A Fredholm compatibility condition fails before a cell solve."""

    def __init__(self, message, violation=None):
        super().__init__(message)
        self.violation = violation


class ConvergenceError(PerihomError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []
