"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(ValueError):
    """A run configuration or compression spec is invalid."""


class CheckpointError(OSError):
    """A tensor container file is missing, truncated or corrupt."""
