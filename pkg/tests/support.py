"""Builders shared by the test modules: scripted replies, tiny indexes, questions."""

from __future__ import annotations

import json
import re
from typing import Sequence

from inspectgate.backend import Backends, ConstantBackend, FunctionBackend, ScriptedBackend, StubEmbedder
from inspectgate.clipindex import ClipIndex, build_index
from inspectgate.timeline import Span, VideoMeta, clip_grid, parse_span
from inspectgate.trajectory import QuestionRecord

OPTIONS = [["A", "red"], ["B", "blue"], ["C", "green"], ["D", "yellow"]]


def retrieve_call(query: str, thought: str = "") -> str:
    body = json.dumps({"name": "visual_retrieve", "arguments": {"query": query}})
    return f"{thought}<tool_call>{body}</tool_call>"


def inspect_call(spans: Sequence[tuple[str, str]], context: str = "", thought: str = "") -> str:
    args = {"spans": [{"start_time": a, "end_time": b} for a, b in spans]}
    if context:
        args["context"] = context
    return f"{thought}<tool_call>{json.dumps({'name': 'visual_inspect', 'arguments': args})}</tool_call>"


def final(answer: str) -> str:
    return f"<final>{answer}</final>"


def verdict(answer: str, confidence: float, evidence: str = "seen in frames") -> str:
    if answer == "SEARCH_MORE":
        return (
            f"Answer: SEARCH_MORE\nEvidence: {evidence}\nConfidence: {confidence}\n"
            "Missing: the moment itself\nNext search: look later\nReminder: keep searching"
        )
    return f"Answer: {answer}\nEvidence: {evidence}\nConfidence: {confidence}"


_CANDIDATE_RE = re.compile(r"^\d+\. \[([^\]]+)\]", re.M)


def candidate_spans(prompt: str) -> list[Span]:
    return [parse_span(m.group(1)) for m in _CANDIDATE_RE.finditer(prompt)]


def filter_reply(useful: Sequence[Span], n_candidates: int = 0) -> str:
    rel = " ".join(f"{i}. PARTIAL maybe" for i in range(1, n_candidates + 1)) or "1. RELATED match"
    lines = "\n".join(f"[{s.label()}]" for s in useful)
    return f"Span relevance: {rel}\nEvidence: caption mentions it\nNext search: later scenes\nUSEFUL_SPANS:\n{lines}"


def top_n_filter(n: int = 2) -> FunctionBackend:
    """Filter that keeps the first n candidates, as a scripted model would."""

    def reply(request):
        spans = candidate_spans(request.prompt)
        return filter_reply(spans[:n], len(spans))

    return FunctionBackend(reply)


def make_index(video_id: str = "v1", duration_s: float = 160.0, dim: int = 16) -> ClipIndex:
    video = VideoMeta(video_id, duration_s)
    captions = [(s, f"clip {i} of {video_id}") for i, s in enumerate(clip_grid(video))]
    return build_index(video, captions, StubEmbedder(dim))


def make_question(
    qid: str = "q1",
    video_id: str = "v1",
    duration_s: float = 160.0,
    answer: str = "B",
    evidence=((32.0, 48.0),),
) -> QuestionRecord:
    return QuestionRecord.from_dict(
        {
            "question_id": qid,
            "video_id": video_id,
            "duration_s": duration_s,
            "question": "What color is the car?",
            "options": OPTIONS,
            "answer": answer,
            "evidence": [list(e) for e in evidence] if evidence else [],
        }
    )


def backends(planner, inspector, filt=None, dim: int = 16, judge=None) -> Backends:
    if isinstance(planner, list):
        planner = ScriptedBackend.replies(planner, "planner")
    if isinstance(inspector, list):
        inspector = ScriptedBackend.replies(inspector, "inspector")
    if isinstance(inspector, str):
        inspector = ConstantBackend(inspector)
    return Backends(planner, inspector, filt or top_n_filter(2), StubEmbedder(dim), judge)


def synthetic_trajectory(qid: str, steps, answer: str | None, video_id: str = "v1"):
    """Trajectory with one inspection per step; an empty step is a malformed turn."""
    from inspectgate.protocol import Mode, parse_inspector
    from inspectgate.trajectory import Inspected, Outcome, PlannerMalformed, Trajectory

    no = parse_inspector(verdict("SEARCH_MORE", 0.1))
    events = []
    for turn, spans in enumerate(steps, start=1):
        if spans:
            events.append(Inspected(turn, tuple(Span.of(a, b) for a, b in spans), "", no, ()))
        else:
            events.append(PlannerMalformed(turn, "no action", ""))
    outcome = Outcome.answered(answer, 0.99, "inspector") if answer is not None else Outcome.not_found()
    return Trajectory(qid, video_id, Mode.DECOUPLED, tuple(events), outcome)
