"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class CapsuleError(Exception):
    exit_code = 1


class ConfigError(CapsuleError, ValueError):
    exit_code = 2


class DataError(CapsuleError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """Malformed binary container; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    pass


class NumericError(CapsuleError, ArithmeticError):
    exit_code = 4

    def __init__(self, message: str, index: int | None = None):
        if index is not None:
            message = f"{message} (first offending index {index})"
        super().__init__(message)
        self.index = index


class ShapeError(CapsuleError, ValueError):
    exit_code = 2


class CapabilityError(CapsuleError):
    """Problem size exceeds what the dense solver supports."""


class InfeasibleError(CapsuleError):
    """No candidate satisfies the hard (non-relaxable) rows."""
