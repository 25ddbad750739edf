"""Offline clip index: caption + embedding per fixed-length clip, cosine top-k, LLM filter."""

from __future__ import annotations

import functools
import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .backend import ChatBackend, ChatRequest, EmbeddingBackend, Message
from .errors import (
    BackendError,
    CaptionMismatch,
    DimensionMismatch,
    DuplicateClip,
    FilterParseError,
    InvalidSpan,
    MalformedTimestamp,
    RejectedInput,
    SchemaError,
)
from .protocol import render_filter_prompt
from .timeline import DEFAULT_CLIP_LEN_S, Span, VideoMeta, clip_grid, parse_span

log = logging.getLogger(__name__)

INDEX_SCHEMA = "clipindex/1"
MAX_USEFUL = 8
RELEVANCE_LABELS = ("RELATED", "PARTIAL", "UNRELATED")


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    video_id: str
    span: Span
    caption: str
    embedding: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "embedding", tuple(float(x) for x in self.embedding))
        if not self.embedding:
            raise DimensionMismatch(f"{self.clip_id}: empty embedding")
        if _norm(self.embedding) == 0.0:
            raise DimensionMismatch(f"{self.clip_id}: zero-norm embedding")


@dataclass(frozen=True)
class ClipIndex:
    video: VideoMeta
    dimension: int
    records: tuple[ClipRecord, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        seen: set[str] = set()
        for r in self.records:
            if r.clip_id in seen:
                raise DuplicateClip(f"duplicate clip_id {r.clip_id}")
            seen.add(r.clip_id)
            if len(r.embedding) != self.dimension:
                raise DimensionMismatch(f"{r.clip_id}: embedding has {len(r.embedding)} dims, index has {self.dimension}")
            if r.video_id != self.video.video_id:
                raise RejectedInput(f"{r.clip_id} belongs to video {r.video_id}, not {self.video.video_id}")

    @property
    def video_id(self) -> str:
        return self.video.video_id

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class RetrievalHit:
    clip: ClipRecord
    score: float

    @property
    def span(self) -> Span:
        return self.clip.span


def _dot(a: Sequence[float], b: Sequence[float]) -> float:
    return math.fsum(x * y for x, y in zip(a, b))


def _norm(v: Sequence[float]) -> float:
    return math.sqrt(math.fsum(x * x for x in v))


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    na, nb = _norm(a), _norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    # exactly rounded sums keep the score a pure function of the two vectors
    return max(-1.0, min(1.0, _dot(a, b) / (na * nb)))


def clip_id_for(video_id: str, i: int) -> str:
    return f"{video_id}#{i:05d}"


def build_index(
    video: VideoMeta,
    captions: Sequence[tuple[Span, str]],
    embedder: EmbeddingBackend,
    clip_len_s: float = DEFAULT_CLIP_LEN_S,
    out: str | Path | None = None,
) -> ClipIndex:
    seen: set[Span] = set()
    for span, _ in captions:
        if span in seen:
            raise DuplicateClip(f"duplicate clip span {span.label()}")
        seen.add(span)
    grid = clip_grid(video, clip_len_s)
    ordered = sorted(captions, key=lambda c: c[0])
    if [s for s, _ in ordered] != grid:
        got = ", ".join(s.label() for s, _ in ordered[:5])
        raise CaptionMismatch(f"captions do not tile the {clip_len_s:g}s clip grid of {video.video_id} (got {got}...)")

    records = []
    dim = None
    for i, (span, caption) in enumerate(ordered):
        clip_id = clip_id_for(video.video_id, i)
        if not caption.strip():
            log.warning("clip %s has an empty caption; embedding it anyway", clip_id)
        try:
            (vec,) = embedder.embed([caption])
        except BackendError as exc:
            raise type(exc)(f"{clip_id}: {exc}") from exc
        except DimensionMismatch as exc:
            raise DimensionMismatch(f"{clip_id}: {exc}") from exc
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise DimensionMismatch(f"{clip_id}: embedder returned {len(vec)} dims, expected {dim}")
        records.append(ClipRecord(clip_id, video.video_id, span, caption, tuple(vec)))
    if dim is None:
        raise CaptionMismatch(f"no captions for {video.video_id}")
    index = ClipIndex(video, dim, tuple(records))
    if out is not None:
        save_index(index, out)
    return index


def retrieve(index: ClipIndex, query_embedding: Sequence[float], k: int) -> list[RetrievalHit]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(query_embedding) != index.dimension:
        raise DimensionMismatch(f"query has {len(query_embedding)} dims, index has {index.dimension}")
    q = [float(x) for x in query_embedding]
    hits = [RetrievalHit(r, cosine(r.embedding, q)) for r in index.records]
    exact: dict[str, Fraction] = {}
    q_int = _as_ints(q)

    def true_score(h: RetrievalHit) -> Fraction:
        if h.clip.clip_id not in exact:
            exact[h.clip.clip_id] = _exact_cosine_key(_as_ints(h.clip.embedding), q_int)
        return exact[h.clip.clip_id]

    def order(a: RetrievalHit, b: RetrievalHit) -> int:
        # float scores a few ulps apart may be the same cosine; settle those exactly
        if abs(a.score - b.score) > _NEAR_TIE:
            return -1 if a.score > b.score else 1
        sa, sb = true_score(a), true_score(b)
        if sa != sb:
            return -1 if sa > sb else 1
        ka, kb = (a.clip.span.start_s, a.clip.clip_id), (b.clip.span.start_s, b.clip.clip_id)
        return (ka > kb) - (ka < kb)

    hits.sort(key=functools.cmp_to_key(order))
    top = hits[:k]
    for i in range(1, len(top)):
        a, b = top[i - 1], top[i]
        if a.score != b.score and abs(a.score - b.score) <= _NEAR_TIE and true_score(a) == true_score(b):
            top[i] = replace(b, score=a.score)  # one cosine, one reported score
    return top


_NEAR_TIE = 1e-12


def _as_ints(v: Sequence[float]) -> list[int]:
    # every float is n / 2**j; scaling by the largest 2**j leaves the cosine unchanged
    ratios = [float(x).as_integer_ratio() for x in v]
    den = max((d for _, d in ratios), default=1)
    return [n * (den // d) for n, d in ratios]


def _exact_cosine_key(a: Sequence[int], b: Sequence[int]) -> Fraction:
    """sign(cos) * cos**2 in exact integers: same order as the true cosine."""
    dot = sum(x * y for x, y in zip(a, b))
    na = sum(x * x for x in a)
    nb = sum(y * y for y in b)
    if not na or not nb:
        return Fraction(0)
    return Fraction((1 if dot >= 0 else -1) * dot * dot, na * nb)


# --- filter stage --------------------------------------------------------------------


@dataclass(frozen=True)
class FilterSummary:
    relevance: tuple[tuple[str, str], ...]
    evidence_text: str
    next_search_cues: tuple[str, ...]
    useful_spans: tuple[Span, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False)
    relevance_text: str = ""

    def to_dict(self) -> dict:
        return {
            "relevance": [list(r) for r in self.relevance],
            "relevance_text": self.relevance_text,
            "evidence_text": self.evidence_text,
            "next_search_cues": list(self.next_search_cues),
            "useful_spans": [s.to_list() for s in self.useful_spans],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FilterSummary":
        return cls(
            relevance=tuple((a, b) for a, b in d.get("relevance", [])),
            evidence_text=d.get("evidence_text", ""),
            next_search_cues=tuple(d.get("next_search_cues", [])),
            useful_spans=tuple(Span.of(a, b) for a, b in d.get("useful_spans", [])),
            warnings=tuple(d.get("warnings", [])),
            relevance_text=d.get("relevance_text", ""),
        )


_SECTION_KEYS = ("Span relevance:", "Evidence:", "Next search:", "USEFUL_SPANS:")
_LABEL_RE = re.compile(r"\b(UNRELATED|PARTIAL|RELATED)\b")


def _sections(text: str) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    current = None
    for raw in text.splitlines():
        line = raw.strip()
        key = next((k for k in _SECTION_KEYS if line.startswith(k)), None)
        if key is not None and key not in out:
            current = key
            rest = line[len(key) :].strip()
            out[key] = [rest] if rest else []
        elif current is not None and line:
            out[current].append(line)
    return out


def _relevance(lines: list[str]) -> tuple[tuple[str, str], ...]:
    text = " ".join(lines)
    marks = list(_LABEL_RE.finditer(text))
    labels = []
    for i, m in enumerate(marks):
        end = marks[i + 1].start() if i + 1 < len(marks) else len(text)
        reason = text[m.end() : end].strip(" :-–—,;.()")
        # drop a trailing window index that belongs to the next label ("... 2.")
        reason = re.sub(r"[\s;,]*\(?\[?\d+[\].):]*$", "", reason).strip()
        labels.append((m.group(1), reason))
    return tuple(labels)


def _cues(lines: list[str]) -> tuple[str, ...]:
    cues = []
    for line in lines:
        for part in re.split(r"[;,|]|\s-\s", line):
            part = part.strip().lstrip("-*•").strip().strip("\"'")
            if part:
                cues.append(part)
    return tuple(cues)


def parse_filter_response(text: str, candidates: Sequence[Span], max_useful: int = MAX_USEFUL) -> FilterSummary:
    sections = _sections(text)
    if "USEFUL_SPANS:" not in sections:
        raise FilterParseError("missing USEFUL_SPANS block")
    warnings = []
    allowed = set(candidates)
    useful: list[Span] = []
    for line in sections["USEFUL_SPANS:"]:
        item = line.lstrip("-*•").strip()
        if not item or item.startswith("..."):
            continue
        item = item.strip("[]() ")
        try:
            span = parse_span(item)
        except (MalformedTimestamp, InvalidSpan):
            warnings.append(f"unparseable useful span {line!r}")
            continue
        if span not in allowed:
            warnings.append(f"useful span {span.label()} is not a candidate; dropped")
            continue
        if span in useful:
            continue
        if len(useful) >= max_useful:
            warnings.append(f"more than {max_useful} useful spans; {span.label()} dropped")
            continue
        useful.append(span)
    relevance = _relevance(sections.get("Span relevance:", []))
    if "Span relevance:" not in sections:
        warnings.append("missing Span relevance section")
    elif len(relevance) != len(candidates):
        warnings.append(f"{len(relevance)} relevance labels for {len(candidates)} candidates")
    return FilterSummary(
        relevance=relevance,
        evidence_text=" ".join(sections.get("Evidence:", [])),
        next_search_cues=_cues(sections.get("Next search:", [])),
        useful_spans=tuple(useful),
        warnings=tuple(warnings),
        relevance_text=" ".join(sections.get("Span relevance:", [])),
    )


def filter_candidates(
    question: str,
    query: str,
    hits: Sequence[RetrievalHit],
    filter_backend: ChatBackend,
    max_useful: int = MAX_USEFUL,
    model_id: str = "",
) -> FilterSummary:
    if not hits:
        raise ValueError("filter_candidates needs at least one hit")
    prompt = render_filter_prompt(question, query, [(h.span, h.clip.caption) for h in hits], max_useful)
    request = ChatRequest((Message("user", prompt),), model_id=model_id, temperature=0.0, purpose="filter")
    response = filter_backend.chat(request)
    return parse_filter_response(response, [h.span for h in hits], max_useful)


# --- persistence -----------------------------------------------------------------------


def save_index(index: ClipIndex, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "schema": INDEX_SCHEMA,
        "video_id": index.video.video_id,
        "duration_s": index.video.duration_s,
        "dimension": index.dimension,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for r in index.records:
        # json writes floats with repr(), which round-trips bit-exactly
        lines.append(
            json.dumps(
                {
                    "clip_id": r.clip_id,
                    "start_s": r.span.start_s,
                    "end_s": r.span.end_s,
                    "caption": r.caption,
                    "embedding": list(r.embedding),
                },
                ensure_ascii=False,
                sort_keys=True,
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _field(obj: dict, key: str, types, line: int):
    if key not in obj:
        raise SchemaError(f"missing field {key!r}", line)
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, types):
        raise SchemaError(f"field {key!r} has wrong type {type(v).__name__}", line)
    return v


def load_index(path: str | Path) -> ClipIndex:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot read index {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise SchemaError("missing header", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"header is not JSON: {exc.msg}", 1) from exc
    if not isinstance(header, dict) or header.get("schema") != INDEX_SCHEMA:
        raise SchemaError(f"header must declare schema {INDEX_SCHEMA!r}", 1)
    video_id = _field(header, "video_id", str, 1)
    duration = _field(header, "duration_s", (int, float), 1)
    dimension = _field(header, "dimension", int, 1)
    try:
        video = VideoMeta(video_id, duration)
    except ValueError as exc:
        raise SchemaError(str(exc), 1) from exc

    records = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"not JSON: {exc.msg}", lineno) from exc
        if not isinstance(obj, dict):
            raise SchemaError("record must be an object", lineno)
        emb = _field(obj, "embedding", list, lineno)
        if len(emb) != dimension:
            raise SchemaError(f"embedding length {len(emb)} != header dimension {dimension}", lineno)
        if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in emb):
            raise SchemaError("embedding must contain numbers only", lineno)
        try:
            span = Span.of(_field(obj, "start_s", (int, float), lineno), _field(obj, "end_s", (int, float), lineno))
            records.append(
                ClipRecord(
                    _field(obj, "clip_id", str, lineno),
                    video_id,
                    span,
                    _field(obj, "caption", str, lineno),
                    tuple(emb),
                )
            )
        except (InvalidSpan, MalformedTimestamp, DimensionMismatch) as exc:
            raise SchemaError(str(exc), lineno) from exc
    try:
        return ClipIndex(video, dimension, tuple(records))
    except (DuplicateClip, DimensionMismatch, RejectedInput) as exc:
        raise SchemaError(str(exc)) from exc


def load_captions(path: str | Path) -> list[tuple[Span, str]]:
    """Caption JSONL: one clip per line with start/end and a caption.

    Accepts ``caption`` or the captioner's ``clip_description`` key, and
    either ``start_s``/``end_s`` seconds or ``start``/``end`` HH:MM:SS.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise SchemaError(f"cannot read captions {path}: {exc}") from exc
    out = []
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"not JSON: {exc.msg}", lineno) from exc
        if not isinstance(obj, dict):
            raise SchemaError("caption line must be an object", lineno)
        caption = obj.get("caption", obj.get("clip_description"))
        if not isinstance(caption, str):
            raise SchemaError("needs a string 'caption' or 'clip_description'", lineno)
        try:
            if "start_s" in obj:
                span = Span.of(obj["start_s"], obj["end_s"])
            else:
                span = parse_span(f"{obj['start']}–{obj['end']}")
        except (KeyError, TypeError, InvalidSpan, MalformedTimestamp) as exc:
            raise SchemaError(f"bad clip bounds: {exc}", lineno) from exc
        out.append((span, caption))
    return out


def index_path(index_dir: str | Path, video_id: str) -> Path:
    return Path(index_dir) / f"{video_id}.jsonl"


def iter_spans(hits: Iterable[RetrievalHit]) -> list[Span]:
    return [h.span for h in hits]
