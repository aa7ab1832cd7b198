"""Exception hierarchy shared across the toolkit.

Every error carries a short machine-readable ``code`` so the CLI can emit
structured JSON on stderr.
"""

from __future__ import annotations


class SliceNavError(Exception):
    """Base class for all toolkit errors."""

    code = "error"

    def to_json(self) -> dict:
        return {"error": self.code, "message": str(self)}


class FormatError(SliceNavError):
    """Malformed file magic, header, or payload."""

    code = "format"


class UnsupportedError(SliceNavError):
    """Well-formed input using a feature outside the supported subset."""

    code = "unsupported"


class ShapeError(SliceNavError):
    """Dimension count or shape mismatch."""

    code = "shape"


class DomainError(SliceNavError):
    """Value outside the operation's domain (bad range, empty mask, ...)."""

    code = "domain"


class ValidationError(SliceNavError):
    """Request or config field failed validation."""

    code = "validation"

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field

    def to_json(self) -> dict:
        out = super().to_json()
        if self.field is not None:
            out["field"] = self.field
        return out


class ConfigError(SliceNavError):
    """Experiment config rejected (unknown key, missing artifact, ...)."""

    code = "config"

    def __init__(self, message: str, code: str = "config"):
        super().__init__(message)
        self.code = code


class CorruptionError(SliceNavError):
    """Stored artifact failed its content hash check."""

    code = "corruption"


class IncompleteError(SliceNavError):
    """Stored artifact is missing files named by its manifest."""

    code = "incomplete"


class NonFiniteError(SliceNavError):
    """A numeric op produced NaN/Inf; surfaced instead of propagated."""

    code = "non_finite"
