"""Exception types shared across the package."""


class ReviewLearnError(Exception):
    """Base class for errors raised by this package."""


class SchemaError(ReviewLearnError, ValueError):
    """Data does not match the declared column schema or model shape."""


class ConfigError(ReviewLearnError, ValueError):
    """Invalid configuration or hyperparameter."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class PrivacyError(ReviewLearnError):
    """An operation would pool privacy-restricted raw data."""


class ConvergenceError(ReviewLearnError, RuntimeError):
    """An iterative fit could not produce a valid model."""
