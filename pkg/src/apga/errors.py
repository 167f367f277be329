"""Exception types shared across the apga package."""


class APGAError(Exception):
    """Base class for all apga errors."""


class InputShapeError(APGAError, ValueError):
    pass


class UsageError(APGAError, RuntimeError):
    pass


class NumericError(APGAError, FloatingPointError):
    """Raised when a tensor that must be finite is not. `name` points at the culprit."""

    def __init__(self, message: str, name: str = None):
        super().__init__(message)
        self.name = name


class UnsupportedError(APGAError, RuntimeError):
    pass


class EmptyDatasetError(APGAError, ValueError):
    pass


class ConfigError(APGAError, ValueError):
    pass
