"""Error types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is outside its legal range."""


class ContractError(ValueError):
    """An input violates a structural precondition (not a shape issue)."""


class InputError(ValueError):
    """Malformed user-supplied data."""


class CheckpointError(RuntimeError):
    """A serialized artifact cannot be read back."""
