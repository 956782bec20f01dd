"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value, file, or architecture constraint."""


class DataError(ValueError):
    """Corrupt, missing, or inconsistent dataset files / manifests."""


class NumericalError(ArithmeticError):
    """Non-finite values where finite ones are required (losses, gradients)."""


class ShapeError(ValueError):
    """Tensor shape mismatch in an engine operation."""
