"""Shared exception types.

Each maps onto one failure family so callers (and the CLI exit-code table)
can tell misuse, bad data, and numeric blow-ups apart.
"""


class DimensionError(ValueError):
    """Shapes do not line up for the requested operation."""


class DomainError(ValueError):
    """A numeric argument lies outside its valid domain."""


class ValidationError(ValueError):
    """A value fails a documented data invariant."""


class ContractError(RuntimeError):
    """An operation was invoked outside its supported regime."""


class ConfigError(ValueError):
    """Unknown configuration key or inconsistent configuration."""


class CheckpointError(IOError):
    """Checkpoint stream is missing, truncated, or carries a bad magic."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite math was required."""
