"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, numeric
failures exit 2.
"""


class UsageError(Exception):
    """The caller violated a precondition (bad argument, empty input, ...)."""


class DimensionError(UsageError):
    """Array shapes do not line up; the message names the offending piece."""


class DataFormatError(UsageError):
    """A file on disk could not be parsed; the message carries a line number."""


class NumericError(Exception):
    """A computation produced NaN/Inf or otherwise left the finite domain."""
