"""Exception types raised by the library.

Construction-time invariant violations on plain values (bad boxes, zero
vectors, out-of-range scores) raise ValueError; everything tied to file
formats, configuration, or dataset generation gets a distinct class here
so callers can tell failure modes apart.
"""

from __future__ import annotations


class UniowError(Exception):
    """Base class for library-specific errors."""


class FileFormatError(UniowError):
    """Malformed record or unrecognized magic in a serialized file."""


class VersionMismatchError(FileFormatError):
    """File declares a format version this build does not read."""


class TruncatedFileError(FileFormatError):
    """File ends before the declared payload is complete."""


class ChecksumError(FileFormatError):
    """Stored checksum does not match the file body."""


class DimensionMismatchError(FileFormatError):
    """Declared vector width disagrees between artifacts."""


class ConfigError(UniowError):
    """Unknown key, bad value, or missing requirement in run config."""


class GenerationError(UniowError):
    """Synthetic world constraints cannot be satisfied."""
