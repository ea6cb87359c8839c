"""Exception types shared across the package."""


class PersistSGDError(Exception):
    """Base class for all package errors."""


class ConfigError(PersistSGDError, ValueError):
    """Invalid layer stack, hyperparameter or policy."""


class DataError(PersistSGDError, ValueError):
    """Dataset file missing, unreadable or malformed."""


class DivergenceError(PersistSGDError, FloatingPointError):
    """Non-finite loss, gradient or parameter during training."""

    def __init__(self, message, *, step=None, epoch=None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch
