"""Exception taxonomy shared across the toolkit, mapped to CLI exit codes."""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class AscError(Exception):
    """Base class for all toolkit errors."""

    exit_code = EXIT_DATA


class ConfigError(AscError):
    """Invalid configuration value, flag, or unsupported setting."""

    exit_code = EXIT_USAGE


class DataError(AscError):
    """Problem with user-supplied data (files or in-memory inputs)."""


class InputError(DataError):
    """Runtime input violates an operation's precondition."""


class FormatError(DataError):
    """Malformed file content (WAV, manifest, cache, checkpoint, scores)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class AlignmentError(DataError):
    """Segment ids of two score/label collections do not line up."""


class IntegrityError(DataError):
    """Checkpoint contents do not match the requested topology."""


class NumericError(AscError):
    """Non-finite values or numerically impossible request."""

    exit_code = EXIT_NUMERIC


class ShapeError(NumericError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ContractError(NumericError):
    """API misuse detected at runtime (e.g. non-scalar loss)."""
