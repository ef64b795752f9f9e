"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ValidationError(ValueError):
    """Input data violates a documented precondition."""


class ConfigError(ValueError):
    """Model or run configuration is internally inconsistent."""


class ContractError(RuntimeError):
    """An API was called in a way its contract forbids."""


class FormatError(ValueError):
    """A file does not conform to its on-disk format."""


class TrainingError(RuntimeError):
    """Optimization cannot proceed (e.g. non-finite gradients)."""
