"""Exception hierarchy shared by every fuzzdistill module."""


class FuzzDistillError(Exception):
    pass


class FormatError(FuzzDistillError):
    """A file does not follow the binary layout it claims to have."""


class ValidationError(FuzzDistillError, ValueError):
    pass


class DimensionError(FuzzDistillError, ValueError):
    pass


class ConfigError(FuzzDistillError):
    pass


class TrainingError(FuzzDistillError):
    """Training diverged. ``epoch`` and ``diagnostics`` locate the failure."""

    def __init__(self, message, epoch=None, diagnostics=None):
        super().__init__(message)
        self.epoch = epoch
        self.diagnostics = diagnostics or {}


class DegenerateInput(UserWarning):
    """Clustering input has no spread; the result is a repeated center."""
