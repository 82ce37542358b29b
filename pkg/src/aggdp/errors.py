"""Exception hierarchy shared by all solvers."""

from __future__ import annotations


class AggDPError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(AggDPError, ValueError):
    """Malformed input: bad shapes, probabilities, partitions, or indices."""


class ConvergenceError(AggDPError, RuntimeError):
    """An iterative method hit its iteration cap or diverged."""

    def __init__(self, message: str, residual: float | None = None, iterations: int | None = None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class SingularSystemError(AggDPError, RuntimeError):
    """A linear system was numerically singular."""


class ImproperPolicyError(ConvergenceError):
    """Policy evaluation failed because an SSP policy never terminates."""

    def __init__(self, message: str, policy=None):
        super().__init__(message)
        self.policy = policy
