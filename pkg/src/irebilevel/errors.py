"""Exception types shared across the package."""


class IreError(Exception):
    """Base class for all package errors."""


class DomainError(IreError, ValueError):
    """Input outside the domain of an operator (e.g. non-finite entries)."""


class ConfigurationError(IreError, ValueError):
    """Inconsistent or invalid parameters."""


class EstimationError(IreError, RuntimeError):
    """An iterative estimate did not converge.

    The last iterate is kept in ``last`` so callers can inspect it.
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class BacktrackingError(IreError, RuntimeError):
    """Backtracking exceeded its reduction cap.

    This almost always means the declared smoothness constant of the smooth
    oracle is wrong.
    """


class NumericalError(IreError, FloatingPointError):
    """Non-finite value produced during an iteration.

    ``trace`` holds whatever was recorded before the failure.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class WindowError(IreError, IndexError):
    """Requested best-iterate window is not covered by a trace."""
