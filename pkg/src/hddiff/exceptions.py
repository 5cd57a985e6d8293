"""Exception types raised across the package."""


class HddiffError(Exception):
    """Base class for errors raised by hddiff."""


class InvalidInputError(HddiffError, ValueError):
    """Malformed data, parameters, or configuration."""


class DegenerateFitError(HddiffError):
    """A fit that exists only in a degenerate limit (zero residual, singular support)."""


class ConvergenceError(HddiffError):
    """An iterative solver ran out of iterations."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class NullDistributionError(HddiffError):
    """The estimated null weights are unusable (non-finite, singular blocks)."""
