"""Exception hierarchy shared by all modules."""


class BoundaryLQError(Exception):
    """Base class for package errors."""


class ValidationError(BoundaryLQError, ValueError):
    """Input data is malformed or violates a structural requirement.

    ``field`` names the offending input so callers can report it.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class NumericalError(BoundaryLQError, ArithmeticError):
    """A numerical procedure failed (non-convergence, ill-conditioning, defect too large)."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ConditioningError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass


class FractionalPowerError(NumericalError):
    pass


class RiccatiError(NumericalError):
    pass
