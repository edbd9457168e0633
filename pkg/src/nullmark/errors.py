"""Exception types raised across the toolkit."""


class WatermarkError(Exception):
    """Base class for every error raised by nullmark."""


class KeyFormatError(WatermarkError, ValueError):
    """Key material could not be parsed or has the wrong type."""


class DimensionError(WatermarkError, ValueError):
    """Array or pattern shapes do not agree."""


class PatternError(WatermarkError, ValueError):
    """Bits or block position outside the valid range."""


class IngestionError(WatermarkError, OSError):
    """A dataset could not be located or decoded."""


class SpecError(WatermarkError, ValueError):
    """A model architecture description is not a valid feed-forward chain."""


class ConfigError(WatermarkError, ValueError):
    """Training configuration failed validation.

    ``fields`` maps each offending field name to a message.
    """

    def __init__(self, fields):
        self.fields = dict(fields)
        msg = "; ".join(f"{k}: {v}" for k, v in self.fields.items())
        super().__init__(msg)


class TrainingError(WatermarkError, RuntimeError):
    """Optimisation diverged."""


class ModelFormatError(WatermarkError, ValueError):
    """A model file is truncated, corrupt or not a model file at all."""


class UnsupportedVersionError(ModelFormatError):
    """A model file was written by an incompatible format version."""
