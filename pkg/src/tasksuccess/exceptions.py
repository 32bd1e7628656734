"""Exception hierarchy shared across the package."""


class TaskSuccessError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(TaskSuccessError):
    """Invalid argument, configuration value, or data structure."""


class IngestionError(TaskSuccessError):
    """On-disk dataset could not be loaded (missing frames, bad manifest, ...)."""


class ShapeError(TaskSuccessError):
    """Tensor/array input has the wrong shape or channel count."""


class CapabilityError(TaskSuccessError):
    """An operation was requested that the architecture does not support."""


class ConfigurationError(TaskSuccessError):
    """A required component (e.g. a feature extractor) was not configured."""


class NumericalError(TaskSuccessError):
    """Training produced non-finite values; carries epoch/batch diagnostics."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
