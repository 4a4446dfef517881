"""Exception types shared across the package.

The CLI maps these onto exit codes: validation problems exit 2, numeric
failures exit 3, file-format and OS-level IO failures exit 4.
"""

from __future__ import annotations


class UniAdetError(Exception):
    """Base class for all package errors."""


class ValidationError(UniAdetError, ValueError):
    """Bad input: shape/domain violations, incompatible configs, bad manifests."""


class NumericError(UniAdetError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""


class FormatError(UniAdetError, ValueError):
    """A serialized artifact is structurally invalid (magic, version, truncation)."""

    def __init__(self, message: str, *, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
