"""Exception types shared across the library.

The CLI maps these onto exit codes: usage/config problems -> 1,
data problems -> 2, numeric failures -> 3.
"""


class DrfnError(Exception):
    """Base class for all library errors."""


class ShapeError(DrfnError):
    """Tensor shapes incompatible with the requested operation."""


class DataError(DrfnError):
    """Malformed or inconsistent input data."""


class NumericError(DrfnError):
    """NaN propagation, divergence, or other numeric breakdown."""


class ConfigError(DrfnError):
    """Invalid configuration file or CLI usage."""
