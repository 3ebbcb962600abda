"""Exception hierarchy shared by all krawdetect modules."""


class KrawdetectError(Exception):
    """Base class for every error raised by this package."""


class FormatError(KrawdetectError):
    """A file or serialized document does not match its declared format."""


class ConsistencyError(KrawdetectError):
    """Two inputs that must agree (e.g. image/label counts) do not."""


class TruncationError(KrawdetectError):
    """A binary payload ended before the declared amount of data."""


class RangeError(KrawdetectError):
    """A numeric argument lies outside its documented domain."""


class OrderError(KrawdetectError):
    """A polynomial order exceeds what the domain size supports."""


class StabilityError(KrawdetectError):
    """A numerically computed basis failed its orthonormality tolerance."""


class ConfigError(KrawdetectError):
    """An invalid configuration value or combination."""


class DegenerateError(KrawdetectError):
    """An input is statistically degenerate (single class, zero variance)."""


class ShapeError(KrawdetectError):
    """Array dimensions do not match the model or each other."""


class VersionError(KrawdetectError):
    """A serialized artifact declares an unsupported format version."""


class IncompleteError(KrawdetectError):
    """A coefficient set is missing orders required by the operation."""


class DataError(KrawdetectError):
    """A dataset is too small or otherwise unusable for the request."""


class IoError(KrawdetectError):
    """A file could not be written or read at the OS level."""
