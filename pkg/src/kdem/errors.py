"""Exception hierarchy shared across the package."""


class KdemError(Exception):
    """Base class for all package errors."""


class ValidationError(KdemError):
    """Input files or in-memory panel data violate a hard constraint."""


class ConvergenceError(KdemError):
    """The variance-component optimizer failed to converge.

    Carries the best iterate found so the caller can inspect it.
    """

    def __init__(self, message, best_params=None, grad_norm=None):
        super().__init__(message)
        self.best_params = best_params
        self.grad_norm = grad_norm


class DecompositionError(KdemError):
    """Residual-variance decomposition has no valid solution."""
