"""Aggregation methods for approximate dynamic programming."""

__version__ = "0.1.0"

from .errors import AggDPError, ConvergenceError, ImproperPolicyError, SingularSystemError, ValidationError

__all__ = ["AggDPError", "ConvergenceError", "ImproperPolicyError", "SingularSystemError", "ValidationError", "__version__"]
