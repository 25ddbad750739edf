"""Episode executor for the decoupled planner/inspector loop and the coupled baseline."""

from __future__ import annotations

import logging
from typing import Sequence

from .backend import Backends, ChatRequest, FrameRef, Message
from .clipindex import ClipIndex, filter_candidates, retrieve
from .errors import BackendError, DimensionMismatch, EmptyPlan, FilterParseError, RejectedInput, VerdictParseError
from .protocol import (
    Final,
    InspectVerdict,
    Malformed,
    Mode,
    ProtocolConfig,
    ToolInspect,
    ToolRetrieve,
    parse_inspector,
    parse_letters,
    parse_planner,
    render_inspect_prompt,
    render_planner_system,
    render_planner_turn,
)
from .timeline import Span, VideoMeta, clamp_span, plan_frames
from .trajectory import (
    INSPECTOR,
    PLANNER,
    EngineConfig,
    Fallback,
    FinalEmitted,
    HitRecord,
    Inspected,
    Notice,
    Outcome,
    PlannerMalformed,
    QuestionRecord,
    Retrieved,
    Trajectory,
    TrajectoryEvent,
)

log = logging.getLogger(__name__)

RETRIEVE = "retrieve"
INSPECT = "inspect"

FINAL_WITHOUT_AUTHORITY = "final not allowed: only visual_inspect can produce the answer"


def inspect_spans(
    question_text: str,
    video_id: str,
    spans: Sequence[Span],
    inspector,
    config: EngineConfig,
    context: str = "",
    fixed_range: bool = False,
    protocol: ProtocolConfig | None = None,
) -> tuple[InspectVerdict, tuple[float, ...]]:
    """One VisualInspect call: sample frames, render the prompt, parse the verdict."""
    plan = plan_frames(spans, config.fps, config.frame_cap)
    media = tuple(FrameRef(video_id, t) for t in plan.timestamps)
    prompt = render_inspect_prompt(question_text, spans, context, fixed_range)
    request = ChatRequest((Message("user", prompt, media),), temperature=0.0, max_tokens=config.max_tokens, purpose="inspector")
    text = inspector.chat(request)
    try:
        verdict = parse_inspector(text, protocol or config.protocol)
    except VerdictParseError as exc:
        verdict = InspectVerdict.unparseable(text, str(exc))
    return verdict, tuple(plan.seconds())


class Episode:
    def __init__(
        self,
        question: QuestionRecord,
        video: VideoMeta,
        index: ClipIndex,
        backends: Backends,
        config: EngineConfig,
    ):
        if index.video_id != question.video_id:
            raise RejectedInput(f"index is for video {index.video_id}, question {question.question_id} needs {question.video_id}")
        self.q = question
        self.video = video
        self.index = index
        self.backends = backends
        self.config = config
        proto = config.protocol
        if question.options:
            # answers are only meaningful in the question's own alphabet
            proto = ProtocolConfig(proto.max_spans_per_call, proto.conf_gate, question.option_letters, proto.strict_search_more)
        self.protocol = proto
        self.events: list[TrajectoryEvent] = []
        self.cache: list[Span] = []
        self.last_tool: str | None = None

    # -- helpers

    def memory(self) -> str:
        return memory_render(self.events)

    def _trajectory(self, outcome: Outcome) -> Trajectory:
        return Trajectory(
            question_id=self.q.question_id,
            video_id=self.q.video_id,
            mode=self.config.mode,
            events=tuple(self.events),
            outcome=outcome,
            config=self.config.to_dict(),
        )

    def _plan(self, turn: int):
        system = render_planner_system(self.config.mode)
        user = render_planner_turn(self.q.text, self.memory(), self.video.duration_s, turn, self.config.budget)
        request = ChatRequest(
            (Message("system", system), Message("user", user)),
            temperature=self.config.planner_temperature,
            max_tokens=self.config.max_tokens,
            purpose="planner",
        )
        return parse_planner(self.backends.planner.chat(request), self.protocol)

    def _retrieve(self, turn: int, action: ToolRetrieve) -> None:
        (vector,) = self.backends.embedder.embed([action.query])
        hits = retrieve(self.index, vector, self.config.k_retrieve)
        summary, error = None, None
        try:
            summary = filter_candidates(self.q.text, action.query, hits, self.backends.filter, self.config.max_useful)
            cached = summary.useful_spans
        except FilterParseError as exc:
            error = str(exc)
            cached = tuple(h.span for h in hits)
        for span in cached:
            if span not in self.cache:
                self.cache.append(span)
        self.events.append(
            Retrieved(
                turn=turn,
                query=action.query,
                hits=tuple(HitRecord(h.clip.clip_id, h.span, h.score) for h in hits),
                summary=summary,
                cached=tuple(cached),
                filter_error=error,
                rationale=action.rationale,
            )
        )
        self.last_tool = RETRIEVE

    def _clamped(self, spans: Sequence[Span]) -> list[Span]:
        out = []
        for s in spans:
            c = clamp_span(s, self.video.duration_s)
            if c is not None:
                out.append(c)
        return out

    def _inspect(self, spans: Sequence[Span], context: str, fixed_range: bool = False):
        return inspect_spans(
            self.q.text, self.q.video_id, spans, self.backends.inspector, self.config, context, fixed_range, self.protocol
        )

    # -- loop

    def run(self) -> Trajectory:
        try:
            return self._run()
        except (BackendError, DimensionMismatch) as exc:
            log.warning("episode %s failed: %s", self.q.question_id, exc)
            return self._trajectory(Outcome.failure(f"{type(exc).__name__}: {exc}"))

    def _run(self) -> Trajectory:
        decoupled = self.config.mode is Mode.DECOUPLED
        K = self.config.budget
        for turn in range(1, K + 1):
            action = self._plan(turn)
            if isinstance(action, ToolRetrieve):
                self._retrieve(turn, action)
            elif isinstance(action, ToolInspect):
                spans = self._clamped(action.spans)
                if not spans:
                    self.events.append(PlannerMalformed(turn, "spans lie outside the video", action.context, action.rationale))
                    continue
                try:
                    verdict, frames = self._inspect(spans, action.context)
                except EmptyPlan as exc:
                    self.events.append(PlannerMalformed(turn, f"no frames to inspect: {exc}", action.context, action.rationale))
                    continue
                self.events.append(Inspected(turn, tuple(spans), action.context, verdict, frames, action.rationale))
                self.last_tool = INSPECT
                if decoupled and verdict.z == 1:
                    self.events.append(FinalEmitted(turn, verdict.answer_text, INSPECTOR))
                    return self._trajectory(Outcome.answered(verdict.answer_text, verdict.confidence, INSPECTOR))
            elif isinstance(action, Final):
                if decoupled:
                    self.events.append(PlannerMalformed(turn, FINAL_WITHOUT_AUTHORITY, action.answer, action.rationale))
                    continue
                if not any(isinstance(e, (Retrieved, Inspected)) for e in self.events):
                    self.events.append(Notice(turn, "final before evidence: no tool output precedes this answer"))
                answer = _normalize_answer(action.answer, self.q)
                self.events.append(FinalEmitted(turn, answer, PLANNER, action.rationale))
                return self._trajectory(Outcome.answered(answer, None, PLANNER))
            else:
                assert isinstance(action, Malformed)
                self.events.append(PlannerMalformed(turn, action.reason, action.raw, action.rationale))

        if not decoupled or self.last_tool == INSPECT:
            return self._trajectory(Outcome.not_found())

        # forced fallback: the episode must end on an inspection
        fb_spans = list(self.cache) if self.cache else [self.video.full_span()]
        verdict, frames = self._inspect(fb_spans, "")
        turn = K + 1
        self.events.append(Fallback(turn, tuple(fb_spans), verdict, frames))
        if verdict.z == 1:
            self.events.append(FinalEmitted(turn, verdict.answer_text, INSPECTOR))
            return self._trajectory(Outcome.answered(verdict.answer_text, verdict.confidence, INSPECTOR))
        return self._trajectory(Outcome.not_found())


def _normalize_answer(text: str, question: QuestionRecord) -> str:
    if question.options:
        letters = parse_letters(text, question.option_letters)
        if letters is not None:
            return ",".join(letters)
    return text.strip()


def run_decoupled(question, video, index, backends, config: EngineConfig | None = None) -> Trajectory:
    config = config or EngineConfig()
    if config.mode is not Mode.DECOUPLED:
        config = EngineConfig.from_dict({**config.to_dict(), "mode": Mode.DECOUPLED})
    return Episode(question, video, index, backends, config).run()


def run_coupled(question, video, index, backends, config: EngineConfig | None = None) -> Trajectory:
    config = EngineConfig.from_dict({**(config or EngineConfig()).to_dict(), "mode": Mode.COUPLED})
    return Episode(question, video, index, backends, config).run()


def run_episode(question, video, index, backends, config: EngineConfig) -> Trajectory:
    return Episode(question, video, index, backends, config).run()


# --- memory ------------------------------------------------------------------------


def _verdict_lines(v: InspectVerdict) -> list[str]:
    lines = [f"  Answer: {'SEARCH_MORE' if v.search_more else (v.answer_text or 'none')}"]
    if v.evidence:
        lines.append(f"  Evidence: {v.evidence}")
    lines.append(f"  Confidence: {v.confidence:.2f}")
    lines.append(f"  Sufficient: {'yes' if v.z == 1 else 'no'}")
    if v.missing:
        lines.append(f"  Missing: {v.missing}")
    if v.next_search:
        lines.append(f"  Next search: {v.next_search}")
    return lines


def memory_render(events: Sequence[TrajectoryEvent]) -> str:
    """Compact search memory shown to the planner. Never includes frame data."""
    out: list[str] = []
    for e in events:
        if isinstance(e, Retrieved):
            out.append(f"[turn {e.turn}] visual_retrieve query={e.query!r}")
            if e.summary is not None:
                s = e.summary
                if s.relevance_text:
                    out.append(f"  Span relevance: {s.relevance_text}")
                if s.evidence_text:
                    out.append(f"  Evidence: {s.evidence_text}")
                if s.next_search_cues:
                    out.append(f"  Next search: {'; '.join(s.next_search_cues)}")
                out.append(f"  USEFUL_SPANS: {', '.join(x.label() for x in s.useful_spans) or 'none'}")
            else:
                out.append(f"  filter failed ({e.filter_error}); candidates: {', '.join(x.label() for x in e.cached)}")
        elif isinstance(e, Inspected):
            out.append(f"[turn {e.turn}] visual_inspect spans={', '.join(x.label() for x in e.spans)}")
            out.extend(_verdict_lines(e.verdict))
        elif isinstance(e, Fallback):
            out.append(f"[turn {e.turn}] forced visual_inspect spans={', '.join(x.label() for x in e.spans)}")
            out.extend(_verdict_lines(e.verdict))
        elif isinstance(e, PlannerMalformed):
            out.append(f"[turn {e.turn}] invalid action ({e.reason}); no tool was run")
    return "\n".join(out)


# --- judge log ------------------------------------------------------------------------


def _cell(text: str) -> str:
    return " ".join(str(text).replace("|", "/").split())


def _verdict_cell(v: InspectVerdict) -> str:
    parts = [f"Answer: {'SEARCH_MORE' if v.search_more else (v.answer_text or 'none')}"]
    if v.evidence:
        parts.append(f"Evidence: {v.evidence}")
    parts.append(f"Confidence: {v.confidence:.2f}")
    if v.missing:
        parts.append(f"Missing: {v.missing}")
    return "; ".join(parts)


def judge_log(trajectory: Trajectory) -> str:
    """Trajectory as ``Turn # | Action | Tool Output | Agent Thought`` rows."""
    rows = ["Turn # | Action | Tool Output | Agent Thought"]
    for e in trajectory.events:
        if isinstance(e, Retrieved):
            if e.summary is not None:
                out = f"Evidence: {e.summary.evidence_text}; USEFUL_SPANS: {', '.join(s.label() for s in e.summary.useful_spans) or 'none'}"
            else:
                out = f"candidates: {', '.join(s.label() for s in e.cached)}"
            row = (e.turn, f"visual_retrieve(query={e.query!r})", out, e.rationale)
        elif isinstance(e, Inspected):
            spans = ", ".join(s.label() for s in e.spans)
            row = (e.turn, f"visual_inspect(spans={spans})", _verdict_cell(e.verdict), e.rationale)
        elif isinstance(e, Fallback):
            spans = ", ".join(s.label() for s in e.spans)
            row = (e.turn, f"visual_inspect(spans={spans}) [forced fallback]", _verdict_cell(e.verdict), "")
        elif isinstance(e, PlannerMalformed):
            row = (e.turn, "invalid action", e.reason, e.rationale)
        elif isinstance(e, FinalEmitted):
            row = (e.turn, f"final ({e.authority})", e.answer, e.rationale)
        else:
            continue
        rows.append(" | ".join(_cell(x) for x in row))
    return "\n".join(rows)
