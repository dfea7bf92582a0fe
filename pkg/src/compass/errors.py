"""Exception hierarchy shared across the package.

Everything raised on purpose derives from CompassError so CLI entry points
can catch one base class and map it to an exit code.
"""

from __future__ import annotations


class CompassError(Exception):
    """Base class for all errors raised by this package."""


class TraceParseError(CompassError):
    """Raised when a trace file is not valid JSON in the declared format."""

    def __init__(self, message: str, byte_offset: int | None = None):
        self.byte_offset = byte_offset
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)


class TraceSchemaError(CompassError):
    """A span record is missing a required field or has an invalid value."""

    def __init__(self, field: str, record_index: int, detail: str = ""):
        self.field = field
        self.record_index = record_index
        message = f"record {record_index}: missing or invalid field '{field}'"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class EmptyTraceError(CompassError):
    """Raised when a trace tree is requested for zero spans."""


class TraceInvariantError(CompassError):
    """A span set violates a structural invariant (mixed ids, duplicates)."""


class ConfigError(CompassError):
    """Invalid or missing runtime configuration."""


class TaxonomyConfigError(ConfigError):
    """Taxonomy config violates the three-level/unique-path contract."""


class MappingConfigError(ConfigError):
    """External-label mapping is not total or references unknown leaves."""


class UnknownErrorTypeError(CompassError):
    """A label could not be resolved to a taxonomy leaf."""

    def __init__(self, query: str, suggestions: list[str]):
        self.query = query
        self.suggestions = suggestions
        hint = ", ".join(suggestions) if suggestions else "none"
        super().__init__(f"unknown error type {query!r}; closest leaves: {hint}")


class BackendConfigError(ConfigError):
    """Backend/embedder settings are unusable (checked at startup)."""


class ScriptKeyError(CompassError):
    """Scripted backend has no canned response for the requested key."""

    def __init__(self, key: str):
        self.key = key
        super().__init__(f"no scripted response for key {key!r}")


class EmbeddingUnavailableError(CompassError):
    """The embedding service could not produce a vector."""


class ZeroVectorError(CompassError):
    """Embedding input produced no tokens / a zero vector."""


class StageFailureError(CompassError):
    """A pipeline stage could not produce a valid output."""

    def __init__(self, stage: str, phase: str, detail: str):
        self.stage = stage
        self.phase = phase
        super().__init__(f"stage '{stage}' failed during {phase}: {detail}")


class MemoryWriteError(CompassError):
    """A memory store append or rewrite failed."""


class TraceGenerationError(CompassError):
    """A synthetic-trace fault spec cannot be satisfied by the shape."""


class AnnotationSchemaError(CompassError):
    """Ground-truth annotation file violates the documented schema."""


class EvaluationInputError(CompassError):
    """Evaluation inputs are inconsistent (trace mismatch, bad lengths)."""
