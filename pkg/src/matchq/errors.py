"""Shared exception types. The CLI maps these onto distinct exit codes."""

from __future__ import annotations


class MatchqError(Exception):
    """Base class for all matchq errors."""


class InvalidInstance(MatchqError, ValueError):
    """Malformed or invariant-violating instance document."""


class InfeasibleTarget(MatchqError):
    """The requested cost/throughput target is provably unattainable.

    Carries a human-readable certificate describing which relaxation rejected
    the target.
    """

    def __init__(self, message: str, certificate: dict | None = None):
        super().__init__(message)
        self.certificate = certificate or {}


class SolverFailure(MatchqError, RuntimeError):
    """Numerical failure inside an LP or linear-algebra routine.

    Distinct from :class:`InfeasibleTarget`: the problem status is unknown.
    """


class SizeBudgetExceeded(MatchqError):
    """A builder would create a model larger than the configured budget."""

    def __init__(self, message: str, dimensions: dict | None = None):
        super().__init__(message)
        self.dimensions = dimensions or {}
