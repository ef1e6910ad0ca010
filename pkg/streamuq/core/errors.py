"""
Error Types

Every failure the pipeline raises on purpose derives from StreamUQError and
carries the process exit code the CLI reports for it:

    0  success
    2  usage / configuration error
    3  data error (parsing, sequencing)
    4  numeric failure
"""

from typing import Optional


class StreamUQError(Exception):
    """Base class for all expected pipeline failures."""
    exit_code: int = 1


class ConfigurationError(StreamUQError):
    """Invalid experiment configuration or network layout."""
    exit_code = 2


class UsageError(StreamUQError):
    """Command invoked without what it needs (e.g. a missing checkpoint)."""
    exit_code = 2


class ArgumentError(StreamUQError, ValueError):
    """Invalid argument passed to a numeric operation."""
    exit_code = 2


class DataError(StreamUQError):
    """Problems with input shot data."""
    exit_code = 3


class ParseError(DataError):
    """Malformed CSV input; `line` is the 1-based line in the file."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SequencingError(DataError):
    """Shot delivered out of order to the online loop."""


class NumericError(StreamUQError):
    """Non-finite values or failed linear algebra."""
    exit_code = 4

    def __init__(self, message: str, layer_index: Optional[int] = None):
        self.layer_index = layer_index
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)


class NotPositiveDefiniteError(NumericError):
    """Precision matrix lost positive definiteness; recoverable by re-regularizing."""
