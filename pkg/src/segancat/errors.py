"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when tensor or volume extents are incompatible."""


class DataError(ValueError):
    """Raised for malformed datasets, manifests or label volumes."""


class NumericError(ArithmeticError):
    """Raised when a NaN/Inf shows up in a forward pass or a gradient.

    ``path`` names the offending parameter when it can be identified.
    """

    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{message} [{path}]")
        self.path = path


class ConfigError(ValueError):
    """Raised for invalid configuration documents; ``key`` names the culprit."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key
