"""Exception hierarchy shared by all hebb modules."""


class HebbError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(HebbError):
    """Array shapes are incompatible for the requested operation."""


class GeometryError(HebbError):
    """Spatial geometry is invalid (e.g. kernel larger than the image)."""


class ConfigError(HebbError):
    """A configuration value or combination of values is invalid."""


class FormatError(HebbError):
    """A file does not conform to its declared binary format."""


class CheckpointError(FormatError):
    """A checkpoint file is corrupt, truncated, or of the wrong version."""


class UnsupportedOperationError(HebbError):
    """The operation is intentionally not implemented for this layer kind."""
