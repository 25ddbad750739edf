"""Decoupled planner/inspector runtime for long-video QA, with grounding diagnostics and rewards."""

__version__ = "0.1.0"

from .timeline import Span, Timestamp, VideoMeta, tiou  # noqa: E402
from .trajectory import EngineConfig, QuestionRecord, Trajectory  # noqa: E402
from .engine import run_coupled, run_decoupled  # noqa: E402

__all__ = [
    "EngineConfig",
    "QuestionRecord",
    "Span",
    "Timestamp",
    "Trajectory",
    "VideoMeta",
    "run_coupled",
    "run_decoupled",
    "tiou",
    "__version__",
]
