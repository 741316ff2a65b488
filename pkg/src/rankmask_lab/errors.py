"""Shared exception types."""


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ContractError(RuntimeError):
    """Raised when a call violates an operation's stated contract."""


class ConfigError(ValueError):
    """Raised when a configuration value is invalid; message names the field."""
