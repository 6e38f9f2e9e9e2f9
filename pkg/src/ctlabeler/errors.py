"""Exception hierarchy shared across the package.

Every error raised by this package derives from :class:`CtLabelerError` so
callers can catch one base class at CLI or batch boundaries.
"""

from __future__ import annotations


class CtLabelerError(Exception):
    """Base class for all errors raised by this package."""


class EmptyReportError(CtLabelerError):
    """Report text is empty or contains no sentences."""


class DuplicateReportIdError(CtLabelerError):
    """Two reports in one corpus share an id."""


class DataFormatError(CtLabelerError):
    """An input file violates its documented schema.

    Carries the offending path and 1-based line number when known so strict
    mode can point at the exact record.
    """

    def __init__(self, message: str, *, path: str | None = None, line_no: int | None = None):
        self.path = path
        self.line_no = line_no
        prefix = ""
        if path is not None:
            prefix = f"{path}:" if line_no is None else f"{path}:{line_no}:"
        super().__init__(f"{prefix} {message}".strip())


class GatewayError(CtLabelerError):
    """Base class for chat endpoint failures."""


class TransientBackendError(GatewayError):
    """Retriable failure (network error, HTTP 5xx, or HTTP 429)."""


class ExhaustedRetriesError(GatewayError):
    """All retry attempts against the chat endpoint failed."""

    def __init__(self, message: str, *, attempts: int = 0):
        self.attempts = attempts
        super().__init__(message)


class MalformedResponseError(GatewayError):
    """The endpoint answered with a body that does not follow the wire protocol."""


class ContextOverflowError(GatewayError):
    """The endpoint rejected the request because the prompt exceeds its context window."""


class UnknownTranscriptIdError(CtLabelerError):
    """A transcript id was requested that the store has never seen."""


class UnparseableSummaryError(CtLabelerError):
    """A summary answer could not be mapped to the expected machine-readable value."""


class PipelineCellError(CtLabelerError):
    """A (report, organ) cell failed; the batch run records it and moves on.

    Wraps the causing error together with enough context to locate the cell.
    """

    def __init__(self, report_id: str, organ: str, stage: str, cause: Exception):
        self.report_id = report_id
        self.organ = organ
        self.stage = stage
        self.cause = cause
        super().__init__(f"report {report_id!r}, organ {organ!r}, stage {stage}: {cause}")


class CheckpointError(CtLabelerError):
    """A checkpoint file is unusable or belongs to a different run configuration."""


class DegenerateInputError(CtLabelerError):
    """A statistic is undefined for the given input (for example a constant ranking)."""
