"""
Exception hierarchy shared by every pipeline module.

The CLI maps these onto process exit codes:
ValidationError -> 2, NumericFailure -> 3.
"""

from __future__ import annotations

from typing import Optional


class InfoVaeError(Exception):
    """Base class for all pipeline errors."""
    pass


class ValidationError(InfoVaeError, ValueError):
    """Raised when an input, file or configuration is rejected."""
    pass


class NumericFailure(InfoVaeError, ArithmeticError):
    """Raised when a NaN or Inf shows up during optimisation."""
    pass


class MvolFormatError(ValidationError):
    """Raised when an MVOL file cannot be decoded.

    offset: byte position where decoding failed (None when not applicable)
    """

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
