"""Exception and warning types shared across the package."""


class ModelError(ValueError):
    """Invalid system data (shapes, non-finite entries, indefinite covariances)."""


class PreconditionError(ValueError):
    """An operation was called outside the region where it is defined."""


class ConvergenceError(RuntimeError):
    """An iterative routine stopped before meeting its tolerance."""

    def __init__(self, message: str, iterations: int | None = None, residual: float | None = None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class AssumptionWarning(UserWarning):
    """A modelling assumption is violated but the analysis can still proceed."""
