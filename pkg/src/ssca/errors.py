"""Exception hierarchy shared across the package."""


class SscaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(SscaError, ValueError):
    """Image, grid, or tensor dimensions do not agree."""


class FormatError(SscaError, ValueError):
    """A binary or text artifact does not match its declared format."""


class UnsupportedVersionError(FormatError):
    """The artifact's format version is not supported by this build."""


class ArchitectureError(SscaError, ValueError):
    """A network layer chain does not produce a valid shape sequence."""


class GeometryError(SscaError, ValueError):
    """Synthetic-scene geometry does not fit the requested image size."""


class ConfigError(SscaError, ValueError):
    """A run configuration is malformed or fails schema validation."""


class DataError(SscaError, ValueError):
    """A dataset, donor pool, or input file is missing or unusable."""


class NumericError(SscaError, ArithmeticError):
    """A numeric invariant broke at runtime (non-finite loss, etc.)."""


class GuardError(SscaError, ValueError):
    """A combinatorial safety guard was exceeded."""
