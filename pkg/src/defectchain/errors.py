"""Exception hierarchy shared across the pipeline."""


class DefectChainError(Exception):
    """Base class for all package errors."""


class ParameterError(DefectChainError, ValueError):
    """Invalid configuration or argument value."""


class DomainError(DefectChainError, ValueError):
    """Evaluation point outside the geometric/image domain."""


class DataError(DefectChainError, ValueError):
    """Malformed or inconsistent observation data."""


class NumericalError(DefectChainError, RuntimeError):
    """A numerical routine (eigensolve, optimizer) failed."""


class FitError(NumericalError):
    """A model fit failed or the data was degenerate.

    Carries the best-so-far parameters when available.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DiagnosticError(DefectChainError, ValueError):
    """A chain diagnostic was requested on unsuitable input."""
