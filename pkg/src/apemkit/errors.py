"""Exception hierarchy shared across the toolkit.

Exit-code mapping used by the CLI:
  ConfigError -> 2, DataError (and subclasses) -> 3, NumericError -> 4.
"""


class ApemkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ApemkitError):
    """Malformed or inconsistent run configuration."""


class DataError(ApemkitError):
    """Bad input data: missing files, malformed formats, shape mismatches."""


class InputShapeError(DataError):
    """An array does not match the shape a network or map expects."""


class FormatError(DataError):
    """A model/map/dataset file violates its on-disk format."""


class ChecksumError(FormatError):
    """Stored checksum does not match the file contents."""


class UnsupportedArchitectureError(DataError):
    """The network contains a layer kind an algorithm cannot handle."""


class MethodInapplicableError(DataError):
    """An explanation method cannot run on this network (e.g. no conv layer)."""


class ZeroMapError(DataError):
    """A relevance map is identically zero and cannot be l1-normalized."""


class NumericError(ApemkitError):
    """Non-finite values encountered where finite math was required."""
