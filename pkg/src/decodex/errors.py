"""Shared exception types."""


class ValidationError(ValueError):
    """Bad spec, config, or argument values."""


class PersistenceError(RuntimeError):
    """Failed to write an artifact to disk."""


class LoadError(RuntimeError):
    """Failed to read an artifact back; message names the offending item."""


class TrainingError(RuntimeError):
    """Training diverged or produced non-finite values."""


class NumericsError(RuntimeError):
    """Non-finite value encountered outside a training loop."""


class GuidanceError(RuntimeError):
    """Non-finite loss term or gradient during guided sampling."""
