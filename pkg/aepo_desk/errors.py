"""Exception hierarchy shared by the library and the CLI."""

from pathlib import Path


class AepoError(Exception):
    """Base error. ``exit_code`` is what the CLI exits with."""

    exit_code = 1

    def __init__(self, message: str):
        self.message = message
        super().__init__(message)


class ConfigError(AepoError):
    """Raised for invalid or inconsistent configuration."""

    exit_code = 2


class UsageError(AepoError):
    """Raised when an operation is called outside its preconditions."""

    exit_code = 2


class NumericError(AepoError):
    """Raised for NaN or infinite inputs to numeric routines."""

    exit_code = 2


class OracleFailure(AepoError):
    """Raised when one or more verification suites fail."""

    exit_code = 3


class StorageError(AepoError):
    """Raised when a file cannot be read or written."""

    exit_code = 4


class DumpParseError(AepoError):
    """Raised for a malformed line in a pool dump."""

    exit_code = 4

    def __init__(self, path: Path | str, line_number: int, reason: str):
        self.path = str(path)
        self.line_number = line_number
        self.reason = reason
        super().__init__(f"{self.path}:{line_number}: {reason}")
