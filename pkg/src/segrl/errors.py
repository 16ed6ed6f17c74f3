"""Exception types shared across the package."""


class SegRLError(Exception):
    """Base class for all package errors."""


class InputError(SegRLError, ValueError):
    """Caller passed malformed data (token out of range, empty workload...)."""


class ConfigError(SegRLError, ValueError):
    """A configuration value is invalid.

    ``problems`` carries every validation failure found, not just the first.
    """

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems or [message])


class StateError(SegRLError, RuntimeError):
    """An object is missing data required by the requested operation."""


class NumericError(SegRLError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class EndOfData(SegRLError):
    """Rollout has neither queued prompts nor unfinished trajectories."""


class PreconditionError(SegRLError, AssertionError):
    """An internal contract was violated; indicates a bug upstream."""
