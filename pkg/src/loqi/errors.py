"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ValidationError -> 3,
EnvironmentalError -> 4, FormatError -> 3.
"""


class LoqiError(Exception):
    """Base class for all package errors."""


class ValidationError(LoqiError):
    """Input violates a documented precondition or invariant."""


class FormatError(LoqiError):
    """A file failed to parse as its documented format."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EnvironmentalError(LoqiError):
    """A required external tool or resource is unavailable."""
