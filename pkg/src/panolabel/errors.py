"""Exception taxonomy.

File decoding problems derive from FileFormatError so callers can map them
to a single I/O exit path while still telling the failure modes apart.
"""


class PanolabelError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PanolabelError):
    """An input violates a documented shape, dtype, or value contract."""


class FileFormatError(PanolabelError):
    """A file does not conform to one of the binary or text formats."""


class BadMagicError(FileFormatError):
    """The file does not start with the expected magic bytes."""


class UnsupportedVersionError(FileFormatError):
    """The file declares a format version this code does not read."""


class TruncatedFileError(FileFormatError):
    """The file ends before the declared payload is complete."""


class DimensionOverflowError(FileFormatError):
    """Declared dimensions are zero or implausibly large."""


class PackingError(PanolabelError):
    """Synthetic scene generation could not place the requested instances."""
