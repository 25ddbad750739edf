"""Prompt rendering and parsing of every model output the engine consumes."""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence, Union

from .errors import InvalidSpan, JudgeParseError, MalformedTimestamp, VerdictParseError
from .timeline import Span, Timestamp, parse_span, parse_timestamp

TEMPLATE_NAMES = ("planner_decoupled", "planner_coupled", "inspect", "filter", "judge")

SEARCH_MORE = "SEARCH_MORE"
TOOL_RETRIEVE = "visual_retrieve"
TOOL_INSPECT = "visual_inspect"


class Mode(str, enum.Enum):
    DECOUPLED = "decoupled"
    COUPLED = "coupled"


@dataclass(frozen=True)
class ProtocolConfig:
    max_spans_per_call: int = 10
    conf_gate: float = 0.95
    option_letters: str = "ABCDEFGH"
    strict_search_more: bool = False

    def __post_init__(self) -> None:
        if not 0 < self.conf_gate <= 1:
            raise ValueError("conf_gate must lie in (0, 1]")
        if self.max_spans_per_call < 1:
            raise ValueError("max_spans_per_call must be >= 1")


# --- templates -------------------------------------------------------------


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    if name not in TEMPLATE_NAMES:
        raise KeyError(name)
    return resources.files("inspectgate").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")


def template_hashes() -> dict[str, str]:
    return {name: hashlib.sha256(load_template(name).encode("utf-8")).hexdigest() for name in TEMPLATE_NAMES}


def format_question(question: str, options: Sequence[tuple[str, str]] | None = None) -> str:
    lines = [question.strip()]
    for letter, text in options or ():
        lines.append(f"{letter}. {text}")
    return "\n".join(lines)


def render_planner_system(mode: Mode | str) -> str:
    mode = Mode(mode)
    return load_template("planner_decoupled" if mode is Mode.DECOUPLED else "planner_coupled")


def render_planner_turn(question_text: str, memory: str, duration_s: float, turn: int, budget: int) -> str:
    return (
        f"Question:\n{question_text}\n\n"
        f"Video duration: {Timestamp(duration_s).render()}\n\n"
        f"Search memory:\n{memory if memory else '(empty)'}\n\n"
        f"Turn {turn} of {budget}."
    )


def spans_label(spans: Sequence[Span]) -> str:
    return ", ".join(s.label() for s in spans)


_CONTEXT_HOLE = "{Context: <optional prior-search summary, only if provided>}"
FIXED_RANGE_LINE = (
    "Fixed-range question: the spans above are the exact time range the question asks about; "
    "treat them as FIXED ground-truth."
)


def render_inspect_prompt(
    question_text: str, spans: Sequence[Span], context: str = "", fixed_range: bool = False
) -> str:
    if not spans:
        raise ValueError("at least one span is required")
    out = []
    for line in load_template("inspect").split("\n"):
        if line == _CONTEXT_HOLE:
            if context and context.strip():
                out.append(f"Context: {context.strip()}")
            if fixed_range:
                out.append(FIXED_RANGE_LINE)
            continue
        out.append(line)
    text = "\n".join(out)
    return text.replace("{spans_label}", spans_label(spans)).replace("{qtext}", question_text)


def extract_spans_label(prompt: str) -> list[Span]:
    """Recover the span list from a rendered inspect prompt."""
    for line in prompt.split("\n"):
        if line.startswith("Spans: ") and line.endswith("."):
            return [parse_span(part) for part in line[len("Spans: ") : -1].split(", ")]
    raise ValueError("no Spans line in prompt")


def render_filter_prompt(
    question_text: str, query: str, candidates: Sequence[tuple[Span, str]], max_useful: int = 8
) -> str:
    if not candidates:
        raise ValueError("at least one candidate is required")
    listing = "\n".join(
        f"{i}. [{span.label()}] {' '.join(caption.split())}" for i, (span, caption) in enumerate(candidates, 1)
    )
    return (
        load_template("filter")
        .replace("{MAX_USEFUL}", str(max_useful))
        .replace("{USER_QUESTION}", question_text)
        .replace("{QUERY_TEXT}", query)
        .replace("{CANDIDATES}", listing)
    )


def render_judge_prompt(question_text: str, trajectory_log: str, final_answer: str) -> str:
    # Only the stand-alone input lines are holes; the inline mention of
    # {{final_answer}} in the fairness section names the field, it is not a slot.
    fills = {"{{query}}": question_text, "{{trajectory_log}}": trajectory_log, "{{final_answer}}": final_answer}
    return "\n".join(fills.get(line, line) for line in load_template("judge").split("\n"))


# --- planner -----------------------------------------------------------------


@dataclass(frozen=True)
class ToolRetrieve:
    query: str
    rationale: str = ""


@dataclass(frozen=True)
class ToolInspect:
    spans: tuple[Span, ...]
    context: str = ""
    rationale: str = ""


@dataclass(frozen=True)
class Final:
    answer: str
    rationale: str = ""


@dataclass(frozen=True)
class Malformed:
    raw: str
    reason: str
    rationale: str = ""


PlannerAction = Union[ToolRetrieve, ToolInspect, Final, Malformed]

_BLOCK_TAGS = ("tool_call", "final")


def _scan_blocks(text: str) -> tuple[list[tuple[str, str]], str | None, str]:
    """Find ``<tool_call>``/``<final>`` blocks without regex backtracking.

    Returns (blocks, error, text outside blocks).
    """
    blocks: list[tuple[str, str]] = []
    outside = []
    pos = 0
    while True:
        hits = [(text.find(f"<{tag}>", pos), tag) for tag in _BLOCK_TAGS]
        hits = [h for h in hits if h[0] >= 0]
        if not hits:
            outside.append(text[pos:])
            break
        start, tag = min(hits)
        outside.append(text[pos:start])
        body_start = start + len(tag) + 2
        close = text.find(f"</{tag}>", body_start)
        if close < 0:
            return blocks, f"unterminated <{tag}>", "".join(outside)
        blocks.append((tag, text[body_start:close]))
        pos = close + len(tag) + 3
    return blocks, None, "".join(outside)


def _rationale(outside: str) -> str:
    return " ".join(outside.replace("<think>", " ").replace("</think>", " ").split())


def _parse_span_obj(obj, cfg: ProtocolConfig) -> Span:
    if isinstance(obj, dict):
        start, end = obj.get("start_time"), obj.get("end_time")
        if not isinstance(start, str) or not isinstance(end, str):
            raise MalformedTimestamp("span needs string start_time and end_time")
        s, e = parse_timestamp(start), parse_timestamp(end)
        if not e.seconds > s.seconds:
            raise InvalidSpan("end≤start")
        return Span(s, e)
    if isinstance(obj, str):
        return parse_span(obj)
    raise MalformedTimestamp("span must be an object with start_time/end_time")


def _parse_tool_call(body: str, cfg: ProtocolConfig, rationale: str, raw: str) -> PlannerAction:
    try:
        obj = json.loads(body.strip())
    except (ValueError, RecursionError) as exc:
        return Malformed(raw, f"invalid JSON: {getattr(exc, 'msg', type(exc).__name__)}", rationale)
    if not isinstance(obj, dict):
        return Malformed(raw, "tool_call is not a JSON object", rationale)
    name = obj.get("name")
    args = obj.get("arguments", {})
    if isinstance(args, str):
        try:
            args = json.loads(args)
        except (ValueError, RecursionError):
            return Malformed(raw, "arguments is not valid JSON", rationale)
    if not isinstance(args, dict):
        return Malformed(raw, "arguments is not an object", rationale)

    if name == TOOL_RETRIEVE:
        query = args.get("query")
        if not isinstance(query, str) or not query.strip():
            return Malformed(raw, "visual_retrieve needs a non-empty query", rationale)
        return ToolRetrieve(query.strip(), rationale)

    if name == TOOL_INSPECT:
        spans = args.get("spans")
        if not isinstance(spans, list) or not spans:
            return Malformed(raw, "visual_inspect needs a non-empty spans list", rationale)
        if len(spans) > cfg.max_spans_per_call:
            return Malformed(raw, f"too many spans ({len(spans)} > {cfg.max_spans_per_call})", rationale)
        parsed = []
        for item in spans:
            try:
                parsed.append(_parse_span_obj(item, cfg))
            except InvalidSpan:
                return Malformed(raw, "end≤start", rationale)
            except MalformedTimestamp as exc:
                return Malformed(raw, f"bad timestamp: {exc}", rationale)
        context = args.get("context", "")
        if not isinstance(context, str):
            context = json.dumps(context, ensure_ascii=False)
        return ToolInspect(tuple(parsed), context.strip(), rationale)

    return Malformed(raw, f"unknown tool: {name!r}", rationale)


def parse_planner(text: str, cfg: ProtocolConfig = ProtocolConfig()) -> PlannerAction:
    if not isinstance(text, str):
        text = str(text)
    blocks, error, outside = _scan_blocks(text)
    rationale = _rationale(outside)
    if error:
        return Malformed(text, error, rationale)
    if not blocks:
        return Malformed(text, "no action", rationale)
    if len(blocks) > 1:
        return Malformed(text, "multiple actions", rationale)
    tag, body = blocks[0]
    if tag == "final":
        answer = body.strip()
        if not answer:
            return Malformed(text, "empty final", rationale)
        return Final(answer, rationale)
    return _parse_tool_call(body, cfg, rationale, text)


# --- answers -------------------------------------------------------------------

_LETTERS_RE = re.compile(r"[A-Za-z](?:\s*,\s*[A-Za-z])*")


def parse_letters(text: str, alphabet: str = "ABCDEFGH") -> tuple[str, ...] | None:
    """``"A,C"`` -> ``("A", "C")``; None if the text is not a letter list."""
    if text is None:
        return None
    v = text.strip().strip("\"'`*.").strip()
    if v.startswith("(") and v.endswith(")"):
        v = v[1:-1].strip()
    if not _LETTERS_RE.fullmatch(v) or any(c.islower() for c in v):
        return None
    letters = [p.strip() for p in v.split(",")]
    if any(letter not in alphabet for letter in letters):
        return None
    return tuple(sorted(set(letters)))


# --- inspector -------------------------------------------------------------------


@dataclass(frozen=True)
class InspectVerdict:
    z: int
    answer: tuple[str, ...] | None
    evidence: str
    confidence: float
    missing: str | None = None
    next_search: str | None = None
    reminder: str | None = None
    search_more: bool = False
    raw: str = ""
    parse_error: str | None = None
    notes: tuple[str, ...] = ()

    @property
    def answer_text(self) -> str | None:
        return ",".join(self.answer) if self.answer else None

    @classmethod
    def unparseable(cls, raw: str, error: str) -> "InspectVerdict":
        return cls(
            z=0,
            answer=None,
            evidence=f"inspector output could not be parsed: {error}",
            confidence=0.0,
            raw=raw,
            parse_error=error,
        )

    def to_dict(self) -> dict:
        return {
            "z": self.z,
            "answer": list(self.answer) if self.answer is not None else None,
            "evidence": self.evidence,
            "confidence": self.confidence,
            "missing": self.missing,
            "next_search": self.next_search,
            "reminder": self.reminder,
            "search_more": self.search_more,
            "raw": self.raw,
            "parse_error": self.parse_error,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InspectVerdict":
        return cls(
            z=int(d["z"]),
            answer=tuple(d["answer"]) if d.get("answer") is not None else None,
            evidence=d.get("evidence", ""),
            confidence=float(d.get("confidence", 0.0)),
            missing=d.get("missing"),
            next_search=d.get("next_search"),
            reminder=d.get("reminder"),
            search_more=bool(d.get("search_more", False)),
            raw=d.get("raw", ""),
            parse_error=d.get("parse_error"),
            notes=tuple(d.get("notes", ())),
        )


_VERDICT_KEYS = ("Answer", "Evidence", "Confidence", "Missing", "Next search", "Reminder")
_CONF_RE = re.compile(r"\d+(?:\.\d+)?|\.\d+")


def _verdict_fields(text: str) -> dict[str, str]:
    fields: dict[str, str] = {}
    current = None
    for raw_line in text.splitlines():
        line = raw_line.strip()
        key = next((k for k in _VERDICT_KEYS if line.startswith(k + ":")), None)
        if key is not None:
            if key in fields:
                current = None  # first occurrence wins
                continue
            fields[key] = line[len(key) + 1 :].strip()
            current = key
        elif current in ("Evidence", "Missing", "Next search", "Reminder") and line:
            fields[current] = f"{fields[current]} {line}".strip()
        else:
            current = None if not line else current
    return fields


def parse_inspector(text: str, cfg: ProtocolConfig = ProtocolConfig()) -> InspectVerdict:
    if not isinstance(text, str):
        text = str(text)
    fields = _verdict_fields(text)
    if "Answer" not in fields:
        raise VerdictParseError("missing Answer line")
    if "Confidence" not in fields:
        raise VerdictParseError("missing Confidence line")
    conf_text = fields["Confidence"].strip()
    if not _CONF_RE.fullmatch(conf_text):
        raise VerdictParseError(f"unparseable Confidence: {conf_text!r}")
    confidence = float(conf_text)
    if not 0.0 <= confidence <= 1.0:
        raise VerdictParseError(f"Confidence outside [0, 1]: {conf_text}")

    notes = []
    answer_value = fields["Answer"].strip().strip("\"'`*").strip()
    search_more = answer_value.rstrip(".") == SEARCH_MORE
    letters = None
    if not search_more:
        letters = parse_letters(answer_value, cfg.option_letters)
        if letters is None:
            notes.append(f"unparseable answer: {answer_value!r}")
    elif cfg.strict_search_more:
        absent = [k for k in ("Missing", "Next search", "Reminder") if k not in fields]
        if absent:
            raise VerdictParseError(f"SEARCH_MORE without {', '.join(absent)}")

    z = int(letters is not None and confidence >= cfg.conf_gate)
    return InspectVerdict(
        z=z,
        answer=letters,
        evidence=fields.get("Evidence", ""),
        confidence=confidence,
        missing=fields.get("Missing"),
        next_search=fields.get("Next search"),
        reminder=fields.get("Reminder"),
        search_more=search_more,
        raw=text,
        notes=tuple(notes),
    )


# --- judge -------------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeVerdict:
    hallucination: bool
    trajectory_clarity: int
    credibility_score: int
    reasoning: str

    def to_dict(self) -> dict:
        return {
            "hallucination": self.hallucination,
            "trajectory_clarity": self.trajectory_clarity,
            "credibility_score": self.credibility_score,
            "reasoning": self.reasoning,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JudgeVerdict":
        return cls(bool(d["hallucination"]), int(d["trajectory_clarity"]), int(d["credibility_score"]), d["reasoning"])


def balanced_objects(text: str):
    """Yield every top-level ``{...}`` substring, honouring JSON strings."""
    i = 0
    n = len(text)
    while i < n:
        start = text.find("{", i)
        if start < 0:
            return
        depth = 0
        in_str = False
        escaped = False
        j = start
        while j < n:
            c = text[j]
            if in_str:
                if escaped:
                    escaped = False
                elif c == "\\":
                    escaped = True
                elif c == '"':
                    in_str = False
            elif c == '"':
                in_str = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    yield text[start : j + 1]
                    break
            j += 1
        else:
            return
        i = j + 1


def _score(obj: dict, key: str) -> int:
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v != int(v):
        raise JudgeParseError(f"{key} must be an integer, got {v!r}")
    if not 0 <= v <= 10:
        raise JudgeParseError(f"{key} out of range 0-10: {v}")
    return int(v)


def parse_judge(text: str) -> JudgeVerdict:
    if not isinstance(text, str):
        raise JudgeParseError("judge output is not text")
    obj = None
    for candidate in balanced_objects(text):
        try:
            parsed = json.loads(candidate)
        except (ValueError, RecursionError):
            continue
        if isinstance(parsed, dict):
            if "hallucination" in parsed:
                obj = parsed
                break
            obj = obj if obj is not None else parsed
    if obj is None:
        raise JudgeParseError("no JSON object in judge output")
    hallucination = obj.get("hallucination")
    if not isinstance(hallucination, bool):
        raise JudgeParseError(f"hallucination must be true/false, got {hallucination!r}")
    reasoning = obj.get("reasoning", "")
    if not isinstance(reasoning, str):
        raise JudgeParseError("reasoning must be a string")
    return JudgeVerdict(hallucination, _score(obj, "trajectory_clarity"), _score(obj, "credibility_score"), reasoning)
