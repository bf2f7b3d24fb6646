# Exception hierarchy shared by every module of the forecasting/planning stack
# Each class also derives from the builtin a caller would naturally catch,
# so `except ValueError` keeps working for argument and domain problems.

from __future__ import annotations

from typing import Optional


class RiskBiasError(Exception):
    """Base class for every error raised by this package."""


# ============================================================================
# USAGE / DOMAIN ERRORS - bad arguments, bad shapes, bad config
# ============================================================================

class UsageError(RiskBiasError, ValueError):
    """An operation was called in a way its contract forbids."""


class DimensionError(UsageError):
    """Array shapes do not chain (e.g. an MLP layer receives the wrong width)."""


class ConfigError(UsageError):
    """Invalid configuration file entry.

    Carries the dotted key path (e.g. ``sim.dt``) and the 1-based line of the
    offending entry when it is known.
    """

    def __init__(self, key: str, message: str, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = f"{key} (line {line})" if line is not None else key
        super().__init__(f"{where}: {message}")


class DomainError(RiskBiasError, ValueError):
    """A numeric argument lies outside the domain of the operation."""


class InvalidParameterError(DomainError):
    """A dataclass field failed validation; ``field`` names it."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field} {message}")


# ============================================================================
# RUNTIME ERRORS - numerics, training, search, file formats
# ============================================================================

class NumericError(RiskBiasError, ArithmeticError):
    """A quantity that must be finite was not."""


class TrainingError(RiskBiasError, RuntimeError):
    """Training diverged or produced non-finite values."""


class FormatError(RiskBiasError, ValueError):
    """A checkpoint or dataset file is malformed, truncated or has the wrong version."""


class ArchitectureMismatchError(FormatError):
    """A checkpoint's architecture descriptor differs from the requested one."""


class SearchFailureError(RiskBiasError, RuntimeError):
    """A search did not reach its tolerance; ``best_residual`` is the closest it got."""

    def __init__(self, message: str, best_residual: float):
        self.best_residual = best_residual
        super().__init__(f"{message} (best residual {best_residual:.3e})")


def require(condition: bool, field: str, message: str):
    """Raise InvalidParameterError(field, message) unless condition holds."""
    if not condition:
        raise InvalidParameterError(field, message)
