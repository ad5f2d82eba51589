"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class QuantForgeError(Exception):
    exit_code = 1


class ArgumentError(QuantForgeError, ValueError):
    """Bad argument: wrong length, bad divisibility, malformed plan, ..."""

    exit_code = 2


class RangeError(QuantForgeError, ValueError):
    """Non-finite input where finite values are required."""

    exit_code = 2


class FormatError(QuantForgeError):
    """Input bytes are not the expected container format."""

    exit_code = 3


class VersionError(FormatError):
    pass


class CorruptionError(FormatError):
    """Container parses but is internally inconsistent (truncation, overlaps, ...)."""


class ValidationError(QuantForgeError, ValueError):
    """An in-memory object is inconsistent and cannot be serialized."""

    exit_code = 3


class UnsupportedTypeError(QuantForgeError):
    exit_code = 4


class DiffError(QuantForgeError):
    """Two models cannot be compared tensor-for-tensor."""

    exit_code = 5

    def __init__(self, message: str, mismatches: list[str] | None = None):
        super().__init__(message)
        self.mismatches = list(mismatches or [])
