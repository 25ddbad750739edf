"""Temporal primitives: timestamps, spans, temporal IoU, clip grids, frame plans."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import EmptyPlan, InvalidSpan, MalformedTimestamp

DEFAULT_CLIP_LEN_S = 16.0
MIN_TAIL_CLIP_S = 1.0
DEFAULT_FPS = 1.0
DEFAULT_FRAME_CAP = 64

# En dash is what the prompt templates use between range endpoints.
RANGE_SEP = "–"

_TS_RE = re.compile(r"(\d{2,}):(\d{2}):(\d{2})")
_RANGE_RE = re.compile(r"(\d{2,}:\d{2}:\d{2})\s*(?:–|—|-|~|to)\s*(\d{2,}:\d{2}:\d{2})")


@dataclass(frozen=True, order=True)
class Timestamp:
    seconds: float

    def __post_init__(self) -> None:
        if not isinstance(self.seconds, (int, float)) or isinstance(self.seconds, bool):
            raise MalformedTimestamp(f"seconds must be a real number, got {self.seconds!r}")
        if math.isnan(self.seconds) or math.isinf(self.seconds) or self.seconds < 0:
            raise MalformedTimestamp(f"seconds must be finite and >= 0, got {self.seconds!r}")
        object.__setattr__(self, "seconds", float(self.seconds))

    def render(self) -> str:
        total = int(self.seconds)  # truncates toward zero
        h, rem = divmod(total, 3600)
        m, s = divmod(rem, 60)
        return f"{h:02d}:{m:02d}:{s:02d}"

    def __str__(self) -> str:
        return self.render()


def parse_timestamp(text: str) -> Timestamp:
    if not isinstance(text, str):
        raise MalformedTimestamp(f"expected a string, got {type(text).__name__}")
    m = _TS_RE.fullmatch(text.strip())
    if m is None:
        raise MalformedTimestamp(f"not an HH:MM:SS timestamp: {text!r}")
    h, mm, ss = (int(g) for g in m.groups())
    if mm > 59 or ss > 59:
        raise MalformedTimestamp(f"minutes/seconds out of range: {text!r}")
    return Timestamp(float(3600 * h + 60 * mm + ss))


def render_timestamp(seconds: float) -> str:
    return Timestamp(seconds).render()


@dataclass(frozen=True, order=True)
class Span:
    start: Timestamp
    end: Timestamp

    def __post_init__(self) -> None:
        if not isinstance(self.start, Timestamp):
            object.__setattr__(self, "start", Timestamp(self.start))
        if not isinstance(self.end, Timestamp):
            object.__setattr__(self, "end", Timestamp(self.end))
        if not self.end.seconds > self.start.seconds:
            raise InvalidSpan(f"end must be strictly after start: [{self.start.seconds}, {self.end.seconds}]")

    @classmethod
    def of(cls, start: float, end: float) -> "Span":
        return cls(Timestamp(start), Timestamp(end))

    @property
    def start_s(self) -> float:
        return self.start.seconds

    @property
    def end_s(self) -> float:
        return self.end.seconds

    @property
    def length(self) -> float:
        return self.end.seconds - self.start.seconds

    def contains(self, t: float) -> bool:
        return self.start.seconds <= t <= self.end.seconds

    def label(self) -> str:
        return f"{self.start.render()}{RANGE_SEP}{self.end.render()}"

    def to_list(self) -> list[float]:
        return [self.start.seconds, self.end.seconds]

    def __str__(self) -> str:
        return self.label()


def parse_span(text: str) -> Span:
    """Parse ``HH:MM:SS–HH:MM:SS`` (en dash, em dash or hyphen)."""
    m = _RANGE_RE.fullmatch(text.strip())
    if m is None:
        raise MalformedTimestamp(f"not an HH:MM:SS range: {text!r}")
    start, end = parse_timestamp(m.group(1)), parse_timestamp(m.group(2))
    if not end.seconds > start.seconds:
        raise InvalidSpan(f"end must be strictly after start: {text!r}")
    return Span(start, end)


def find_spans(text: str) -> list[Span]:
    """All well-formed ranges embedded anywhere in ``text``, in order."""
    out = []
    for m in _RANGE_RE.finditer(text):
        try:
            out.append(parse_span(m.group(0)))
        except (MalformedTimestamp, InvalidSpan):
            continue
    return out


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    duration_s: float

    def __post_init__(self) -> None:
        if not self.duration_s > 0:
            raise ValueError(f"duration_s must be positive, got {self.duration_s!r}")
        object.__setattr__(self, "duration_s", float(self.duration_s))

    def full_span(self) -> Span:
        return Span.of(0.0, self.duration_s)


def tiou(a: Span, b: Span) -> float:
    inter = min(a.end_s, b.end_s) - max(a.start_s, b.start_s)
    if inter <= 0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


def best_tiou(spans: Iterable[Span], gold: Iterable[Span]) -> float:
    gold = list(gold)
    best = 0.0
    for s in spans:
        for g in gold:
            v = tiou(s, g)
            if v > best:
                best = v
    return best


def clip_grid(video: VideoMeta, clip_len_s: float = DEFAULT_CLIP_LEN_S) -> list[Span]:
    if not clip_len_s > 0:
        raise ValueError("clip_len_s must be positive")
    spans = []
    i = 0
    while True:
        start = i * clip_len_s
        if start >= video.duration_s:
            break
        end = min((i + 1) * clip_len_s, video.duration_s)
        if end - start < MIN_TAIL_CLIP_S:
            break
        spans.append(Span.of(start, end))
        i += 1
    return spans


@dataclass(frozen=True)
class FramePlan:
    timestamps: tuple[Timestamp, ...]
    fps: float
    cap: int
    spans: tuple[Span, ...] = field(default=(), compare=False)

    def seconds(self) -> list[float]:
        return [t.seconds for t in self.timestamps]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def plan_frames(spans: Sequence[Span], fps: float = DEFAULT_FPS, cap: int = DEFAULT_FRAME_CAP) -> FramePlan:
    if not fps > 0:
        raise ValueError("fps must be positive")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    step = 1.0 / fps
    covered = _union_length(spans)
    if covered < step:
        raise EmptyPlan(f"spans cover {covered:.3f}s, less than one sample interval ({step:.3f}s)")

    # keyed on microseconds so float noise cannot produce near-duplicates
    samples: dict[int, float] = {}
    for span in spans:
        i = 0
        while True:
            t = span.start_s + i * step
            if t >= span.end_s:
                break
            samples.setdefault(round(t * 1_000_000), t)
            i += 1
    ordered = [samples[k] for k in sorted(samples)]

    if len(ordered) > cap:
        if cap == 1:
            ordered = [ordered[0]]
        else:
            last = len(ordered) - 1
            ordered = [ordered[_round_half_up(i * last / (cap - 1))] for i in range(cap)]
    return FramePlan(tuple(Timestamp(t) for t in ordered), fps, cap, tuple(spans))


def _union_length(spans: Sequence[Span]) -> float:
    total = 0.0
    cur_start = cur_end = None
    for s in sorted(spans):
        if cur_end is None or s.start_s > cur_end:
            if cur_end is not None:
                total += cur_end - cur_start
            cur_start, cur_end = s.start_s, s.end_s
        else:
            cur_end = max(cur_end, s.end_s)
    if cur_end is not None:
        total += cur_end - cur_start
    return total


def merge_spans(spans: Iterable[Span]) -> list[Span]:
    """Coalesce overlapping or touching spans."""
    merged: list[list[float]] = []
    for s in sorted(spans):
        if merged and s.start_s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], s.end_s)
        else:
            merged.append([s.start_s, s.end_s])
    return [Span.of(a, b) for a, b in merged]


def clamp_span(span: Span, duration_s: float) -> Span | None:
    start = min(span.start_s, duration_s)
    end = min(span.end_s, duration_s)
    if end <= start:
        return None
    return Span.of(start, end)
