"""Exception hierarchy shared by the library and the CLI."""

from __future__ import annotations

import enum


class XLMergeError(Exception):
    """Base class for every error raised by xlmerge."""


class ShapeError(XLMergeError, ValueError):
    """Operands have incompatible shapes."""


class ValidationError(XLMergeError, ValueError):
    """Adapter sets or configuration are not usable for the requested merge."""

    def __init__(self, message: str, violations: list[str] | None = None):
        super().__init__(message)
        self.violations = list(violations or [])


class NumericError(XLMergeError, ArithmeticError):
    """A numerical routine failed (non-convergence, singular system, non-finite values)."""


class SvdConvergenceError(NumericError):
    pass


class ErrorCode(str, enum.Enum):
    BAD_MAGIC = "bad_magic"
    UNSUPPORTED_VERSION = "unsupported_version"
    BAD_HEADER = "bad_header"
    OUT_OF_BOUNDS = "out_of_bounds"
    OVERLAP = "overlap"
    DUPLICATE_NAME = "duplicate_name"
    SIZE_MISMATCH = "size_mismatch"
    KIND_SHAPE = "kind_shape"
    NON_FINITE = "non_finite"


class FormatError(XLMergeError):
    """A checkpoint file is malformed. ``code`` identifies the failure class."""

    def __init__(self, code: ErrorCode, message: str):
        super().__init__(f"[{code.value}] {message}")
        self.code = code


class SweepError(XLMergeError):
    """Scoring failed during a t sweep; ``t`` is the offending grid point."""

    def __init__(self, t: float | None, message: str):
        where = f"t={t!r}: " if t is not None else ""
        super().__init__(where + message)
        self.t = t
