"""Questions, engine configuration, trajectory events and their JSON forms."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

from .clipindex import FilterSummary
from .errors import InvalidSpan, MalformedTimestamp, RejectedInput, SchemaError
from .protocol import InspectVerdict, Mode, ProtocolConfig, format_question, parse_letters
from .timeline import DEFAULT_CLIP_LEN_S, DEFAULT_FPS, DEFAULT_FRAME_CAP, Span

TRAJECTORY_SCHEMA = "trajectory/1"

ANSWERED = "answered"
EVIDENCE_NOT_FOUND = "evidence_not_found"
BACKEND_FAILURE = "backend_failure"

PLANNER = "planner"
INSPECTOR = "inspector"


def _spans(raw) -> tuple[Span, ...]:
    return tuple(Span.of(a, b) for a, b in raw)


def _span_lists(spans: Iterable[Span]) -> list[list[float]]:
    return [s.to_list() for s in spans]


@dataclass(frozen=True)
class QuestionRecord:
    question_id: str
    video_id: str
    duration_s: float
    question: str
    options: tuple[tuple[str, str], ...] = ()
    answer: str | None = None
    evidence: tuple[Span, ...] | None = None
    time_reference: Span | None = None

    def __post_init__(self) -> None:
        if not self.duration_s > 0:
            raise RejectedInput(f"{self.question_id}: duration_s must be positive")
        if self.options and self.answer is not None:
            letters = {letter for letter, _ in self.options}
            got = parse_letters(self.answer, "".join(sorted(letters)))
            if got is None:
                raise RejectedInput(f"{self.question_id}: gold answer {self.answer!r} not among option letters")
        for span in self.evidence or ():
            if span.end_s > self.duration_s + 1e-9:
                raise RejectedInput(f"{self.question_id}: evidence {span.label()} exceeds video duration")

    @property
    def text(self) -> str:
        return format_question(self.question, self.options)

    @property
    def option_letters(self) -> str:
        return "".join(letter for letter, _ in self.options)

    @property
    def has_evidence(self) -> bool:
        return bool(self.evidence)

    def to_dict(self) -> dict:
        d = {
            "question_id": self.question_id,
            "video_id": self.video_id,
            "duration_s": self.duration_s,
            "question": self.question,
            "options": [list(o) for o in self.options],
            "answer": self.answer,
            "evidence": _span_lists(self.evidence) if self.evidence is not None else None,
        }
        if self.time_reference is not None:
            d["time_reference"] = self.time_reference.to_list()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QuestionRecord":
        try:
            evidence = d.get("evidence")
            tref = d.get("time_reference")
            return cls(
                question_id=str(d["question_id"]),
                video_id=str(d["video_id"]),
                duration_s=float(d["duration_s"]),
                question=str(d["question"]),
                options=tuple((str(a), str(b)) for a, b in d.get("options") or ()),
                answer=d.get("answer"),
                evidence=_spans(evidence) if evidence else None,
                time_reference=Span.of(*tref) if tref else None,
            )
        except (KeyError, TypeError, ValueError, InvalidSpan, MalformedTimestamp) as exc:
            if isinstance(exc, RejectedInput):
                raise
            raise RejectedInput(f"bad question record: {exc}") from exc


def load_dataset(path: str | Path) -> list[QuestionRecord]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise SchemaError(f"cannot read dataset {path}: {exc}") from exc
    out = []
    seen: set[str] = set()
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            q = QuestionRecord.from_dict(json.loads(raw))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"not JSON: {exc.msg}", lineno) from exc
        except RejectedInput as exc:
            raise SchemaError(str(exc), lineno) from exc
        if q.question_id in seen:
            raise RejectedInput(f"line {lineno}: duplicate question_id {q.question_id}")
        seen.add(q.question_id)
        out.append(q)
    return out


@dataclass(frozen=True)
class EngineConfig:
    budget: int = 16
    k_retrieve: int = 10
    mode: Mode = Mode.DECOUPLED
    clip_len_s: float = DEFAULT_CLIP_LEN_S
    fps: float = DEFAULT_FPS
    frame_cap: int = DEFAULT_FRAME_CAP
    max_useful: int = 8
    planner_temperature: float = 0.0
    max_tokens: int = 2048
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.budget < 1:
            raise ValueError("budget K must be >= 1")
        if self.k_retrieve < 1:
            raise ValueError("k_retrieve must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        d = dict(d)
        if "protocol" in d and isinstance(d["protocol"], dict):
            d["protocol"] = ProtocolConfig(**d["protocol"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# --- events -------------------------------------------------------------------------


@dataclass(frozen=True)
class HitRecord:
    clip_id: str
    span: Span
    score: float


@dataclass(frozen=True)
class Retrieved:
    turn: int
    query: str
    hits: tuple[HitRecord, ...]
    summary: FilterSummary | None
    cached: tuple[Span, ...]
    filter_error: str | None = None
    rationale: str = ""
    kind = "retrieved"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "turn": self.turn,
            "query": self.query,
            "hits": [{"clip_id": h.clip_id, "span": h.span.to_list(), "score": h.score} for h in self.hits],
            "summary": self.summary.to_dict() if self.summary else None,
            "cached": _span_lists(self.cached),
            "filter_error": self.filter_error,
            "rationale": self.rationale,
        }


@dataclass(frozen=True)
class Inspected:
    turn: int
    spans: tuple[Span, ...]
    context: str
    verdict: InspectVerdict
    frames: tuple[float, ...]
    rationale: str = ""
    kind = "inspected"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "turn": self.turn,
            "spans": _span_lists(self.spans),
            "context": self.context,
            "verdict": self.verdict.to_dict(),
            "frames": list(self.frames),
            "rationale": self.rationale,
        }


@dataclass(frozen=True)
class PlannerMalformed:
    turn: int
    reason: str
    raw: str = ""
    rationale: str = ""
    kind = "planner_malformed"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "turn": self.turn, "reason": self.reason, "raw": self.raw, "rationale": self.rationale}


@dataclass(frozen=True)
class FinalEmitted:
    turn: int
    answer: str
    authority: str
    rationale: str = ""
    kind = "final"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "turn": self.turn,
            "answer": self.answer,
            "authority": self.authority,
            "rationale": self.rationale,
        }


@dataclass(frozen=True)
class Fallback:
    turn: int
    spans: tuple[Span, ...]
    verdict: InspectVerdict
    frames: tuple[float, ...]
    kind = "fallback"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "turn": self.turn,
            "spans": _span_lists(self.spans),
            "verdict": self.verdict.to_dict(),
            "frames": list(self.frames),
        }


@dataclass(frozen=True)
class Notice:
    turn: int
    message: str
    kind = "notice"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "turn": self.turn, "message": self.message}


TrajectoryEvent = Union[Retrieved, Inspected, PlannerMalformed, FinalEmitted, Fallback, Notice]


def event_from_dict(d: dict) -> TrajectoryEvent:
    kind = d["kind"]
    if kind == "retrieved":
        return Retrieved(
            turn=d["turn"],
            query=d["query"],
            hits=tuple(HitRecord(h["clip_id"], Span.of(*h["span"]), h["score"]) for h in d["hits"]),
            summary=FilterSummary.from_dict(d["summary"]) if d.get("summary") else None,
            cached=_spans(d["cached"]),
            filter_error=d.get("filter_error"),
            rationale=d.get("rationale", ""),
        )
    if kind == "inspected":
        return Inspected(
            d["turn"],
            _spans(d["spans"]),
            d.get("context", ""),
            InspectVerdict.from_dict(d["verdict"]),
            tuple(d.get("frames", ())),
            d.get("rationale", ""),
        )
    if kind == "planner_malformed":
        return PlannerMalformed(d["turn"], d["reason"], d.get("raw", ""), d.get("rationale", ""))
    if kind == "final":
        return FinalEmitted(d["turn"], d["answer"], d["authority"], d.get("rationale", ""))
    if kind == "fallback":
        return Fallback(d["turn"], _spans(d["spans"]), InspectVerdict.from_dict(d["verdict"]), tuple(d.get("frames", ())))
    if kind == "notice":
        return Notice(d["turn"], d["message"])
    raise SchemaError(f"unknown event kind {kind!r}")


@dataclass(frozen=True)
class Outcome:
    status: str
    answer: str | None = None
    confidence: float | None = None
    authority: str | None = None
    detail: str | None = None

    @classmethod
    def answered(cls, answer: str, confidence: float | None, authority: str) -> "Outcome":
        return cls(ANSWERED, answer, confidence, authority)

    @classmethod
    def not_found(cls) -> "Outcome":
        return cls(EVIDENCE_NOT_FOUND)

    @classmethod
    def failure(cls, detail: str) -> "Outcome":
        return cls(BACKEND_FAILURE, detail=detail)

    @property
    def is_answered(self) -> bool:
        return self.status == ANSWERED


@dataclass(frozen=True)
class Trajectory:
    question_id: str
    video_id: str
    mode: Mode
    events: tuple[TrajectoryEvent, ...]
    outcome: Outcome
    config: dict = field(default_factory=dict, compare=False)

    @property
    def turns(self) -> int:
        return max((e.turn for e in self.events), default=0)

    def of_kind(self, *types) -> list:
        return [e for e in self.events if isinstance(e, types)]

    @property
    def protocol_compliant(self) -> bool:
        return not any(isinstance(e, PlannerMalformed) for e in self.events)

    def to_dict(self) -> dict:
        return {
            "schema": TRAJECTORY_SCHEMA,
            "question_id": self.question_id,
            "video_id": self.video_id,
            "mode": Mode(self.mode).value,
            "events": [e.to_dict() for e in self.events],
            "outcome": asdict(self.outcome),
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        if d.get("schema") != TRAJECTORY_SCHEMA:
            raise SchemaError(f"expected schema {TRAJECTORY_SCHEMA!r}, got {d.get('schema')!r}")
        return cls(
            question_id=d["question_id"],
            video_id=d["video_id"],
            mode=Mode(d["mode"]),
            events=tuple(event_from_dict(e) for e in d["events"]),
            outcome=Outcome(**d["outcome"]),
            config=d.get("config", {}),
        )


def load_trajectories(path: str | Path) -> list[Trajectory]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise SchemaError(f"cannot read trajectories {path}: {exc}") from exc
    out = []
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            out.append(Trajectory.from_dict(json.loads(raw)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad trajectory: {exc}", lineno) from exc
    return out


def accessed_by_turn(trajectory: Trajectory, include_retrieval: bool = True) -> list[tuple[int, list[Span]]]:
    """Spans accessed at each turn 1..T (inspections, fallback, optionally retrieval)."""
    per: dict[int, list[Span]] = {}
    for e in trajectory.events:
        per.setdefault(e.turn, [])
        if isinstance(e, (Inspected, Fallback)):
            per[e.turn].extend(e.spans)
        elif isinstance(e, Retrieved) and include_retrieval:
            per[e.turn].extend(e.summary.useful_spans if e.summary else ())
    return [(t, per.get(t, [])) for t in range(1, trajectory.turns + 1)]


def cache_provenance_ok(trajectory: Trajectory, cache: Sequence[Span]) -> bool:
    retrieved = {s for e in trajectory.of_kind(Retrieved) for s in e.cached}
    return all(s in retrieved for s in cache)
