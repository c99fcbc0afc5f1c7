"""Exception hierarchy.

Every error the package raises deliberately derives from HierarqError so the
CLI and service can map failures to stable exit codes / HTTP statuses:
input and configuration problems -> exit code 1, numerical failures -> 2.
"""


class HierarqError(Exception):
    """Base class for all errors raised by this package on purpose."""

    exit_code = 1


class ConfigError(HierarqError):
    """Bad configuration: unknown key, wrong type, invalid value."""


class DimensionError(HierarqError):
    """Tensor shape or dtype mismatch in a kernel or model operation."""


class FormatError(HierarqError):
    """Malformed binary container, checkpoint, or lexicon file."""


class InputError(HierarqError):
    """Unusable runtime input: empty prompt, wrong frame shape, and the like."""


class SequenceError(HierarqError):
    """Frames presented out of order to a streaming context."""


class NumericalError(HierarqError):
    """NaN/Inf produced by a kernel, or training diverged."""

    exit_code = 2
