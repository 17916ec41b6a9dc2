"""Exception types raised across the package."""


class CTHMMError(Exception):
    """Base class for all package errors."""


class NumericDomainError(CTHMMError, ValueError):
    """A numeric input lies outside the domain of an operation."""


class StructuralError(CTHMMError, ValueError):
    """Inputs are well-typed but structurally inconsistent."""


class LikelihoodImpossibleError(CTHMMError, FloatingPointError):
    """The observed data has zero likelihood under the current parameters."""

    def __init__(self, message, subject=None, visit=None):
        super().__init__(message)
        self.subject = subject
        self.visit = visit


class SamplingError(CTHMMError, RuntimeError):
    """A stochastic sampler failed to produce a draw."""


class MoveUnavailableError(CTHMMError):
    """A trans-dimensional move cannot be proposed from the current state."""


class StaleCacheError(CTHMMError, RuntimeError):
    """Cached smoothing results no longer match the current parameters."""
