"""Exception types shared across the package."""

from __future__ import annotations


class InspectGateError(Exception):
    """Base class for every error raised by this package."""


class MalformedTimestamp(InspectGateError, ValueError):
    pass


class InvalidSpan(InspectGateError, ValueError):
    pass


class EmptyPlan(InspectGateError, ValueError):
    pass


class DimensionMismatch(InspectGateError, ValueError):
    pass


class DuplicateClip(InspectGateError, ValueError):
    pass


class CaptionMismatch(InspectGateError, ValueError):
    pass


class SchemaError(InspectGateError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FilterParseError(InspectGateError, ValueError):
    pass


class VerdictParseError(InspectGateError, ValueError):
    pass


class JudgeParseError(InspectGateError, ValueError):
    pass


class MissingGold(InspectGateError, ValueError):
    pass


class NoDisjointClip(InspectGateError, ValueError):
    pass


class RejectedInput(InspectGateError, ValueError):
    pass


class BackendError(InspectGateError):
    """A model service failed to produce a usable response."""


class Timeout(BackendError):
    pass


class HttpError(BackendError):
    def __init__(self, status: int, detail: str = ""):
        self.status = status
        super().__init__(f"HTTP {status}: {detail}" if detail else f"HTTP {status}")


class RateLimited(HttpError):
    def __init__(self, detail: str = ""):
        super().__init__(429, detail)


class ScriptExhausted(InspectGateError):
    """A scripted backend received more calls than it has entries.

    Deliberately not a BackendError: the engine must not absorb it as an
    episode failure, it has to fail the test that wrote the script.
    """


class ScriptMismatch(ScriptExhausted):
    pass
