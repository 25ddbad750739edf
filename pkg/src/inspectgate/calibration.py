"""Inspector refusal calibration: non-target vs ground-truth 16 s clips."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Iterable, Sequence

from .clipindex import ClipIndex
from .errors import MissingGold, NoDisjointClip
from .protocol import InspectVerdict, ProtocolConfig, parse_letters
from .timeline import DEFAULT_CLIP_LEN_S, Span, VideoMeta, clip_grid, merge_spans
from .engine import inspect_spans
from .trajectory import EngineConfig, QuestionRecord

NON_TARGET = "Non-target"
GROUND_TRUTH = "Ground-truth"


@dataclass(frozen=True)
class ProbeResult:
    question_id: str
    probe: str
    span: Span
    verdict: InspectVerdict
    correct: bool | None


def _rng(seed: int, question_id: str) -> random.Random:
    # str seeds are hashed with sha512, stable across processes
    return random.Random(f"{seed}:{question_id}")


def nontarget_clip(
    question: QuestionRecord,
    rng: random.Random,
    index: ClipIndex | None = None,
    clip_len_s: float = DEFAULT_CLIP_LEN_S,
) -> Span:
    """A full-length grid clip sharing no positive-length time with the evidence."""
    if not question.evidence:
        raise MissingGold(f"{question.question_id} has no evidence intervals")
    if index is not None:
        grid = [r.span for r in index.records]
    else:
        grid = clip_grid(VideoMeta(question.video_id, question.duration_s), clip_len_s)
    evidence = merge_spans(question.evidence)
    candidates = [
        s
        for s in grid
        if s.length >= clip_len_s - 1e-9
        and all(min(s.end_s, e.end_s) - max(s.start_s, e.start_s) <= 0 for e in evidence)
    ]
    if not candidates:
        raise NoDisjointClip(f"{question.question_id}: evidence leaves no {clip_len_s:g}s clip free")
    return candidates[rng.randrange(len(candidates))]


def groundtruth_clip(question: QuestionRecord, rng: random.Random, clip_len_s: float = DEFAULT_CLIP_LEN_S) -> Span:
    """A clip_len_s window inside one evidence interval.

    Evidence shorter than the clip gets a window centred on it, clamped to the
    video, which then contains the interval instead of lying inside it.
    """
    if not question.evidence:
        raise MissingGold(f"{question.question_id} has no evidence intervals")
    interval = question.evidence[rng.randrange(len(question.evidence))]
    if interval.length >= clip_len_s:
        lo, hi = math.ceil(interval.start_s), math.floor(interval.end_s - clip_len_s)
        start = float(rng.randint(lo, hi)) if lo <= hi else interval.start_s
        return Span.of(start, start + clip_len_s)
    mid = (interval.start_s + interval.end_s) / 2
    start = max(0.0, min(mid - clip_len_s / 2, question.duration_s - clip_len_s))
    return Span.of(start, min(start + clip_len_s, question.duration_s))


def _correct(verdict: InspectVerdict, question: QuestionRecord) -> bool | None:
    if verdict.z != 1 or question.answer is None:
        return None
    gold = parse_letters(question.answer, question.option_letters or "ABCDEFGH")
    return verdict.answer == gold


def calibration_probe(
    question: QuestionRecord,
    index: ClipIndex | None,
    inspector_backend,
    seed: int = 0,
    config: EngineConfig | None = None,
    fixed_range: bool = True,
) -> tuple[ProbeResult, ProbeResult]:
    """Inspect one non-target clip then one ground-truth clip; returns both verdicts."""
    config = config or EngineConfig()
    rng = _rng(seed, question.question_id)
    nt_span = nontarget_clip(question, rng, index, config.clip_len_s)
    gt_span = groundtruth_clip(question, rng, config.clip_len_s)
    proto = config.protocol
    if question.options:
        proto = ProtocolConfig(proto.max_spans_per_call, proto.conf_gate, question.option_letters, proto.strict_search_more)
    results = []
    for probe, span in ((NON_TARGET, nt_span), (GROUND_TRUTH, gt_span)):
        verdict, _ = inspect_spans(
            question.text, question.video_id, [span], inspector_backend, config, "", fixed_range, proto
        )
        results.append(ProbeResult(question.question_id, probe, span, verdict, _correct(verdict, question)))
    return results[0], results[1]


@dataclass(frozen=True)
class CalibrationRow:
    label: str
    clip: str
    n: int
    refused: int
    answered: int
    answered_correct: int

    @property
    def refusal_pct(self) -> float | None:
        return 100.0 * self.refused / self.n if self.n else None

    @property
    def answer_pct(self) -> float | None:
        return 100.0 * self.answered / self.n if self.n else None

    @property
    def acc_ans_pct(self) -> float | None:
        return 100.0 * self.answered_correct / self.answered if self.answered else None

    def to_dict(self) -> dict:
        return {
            "inspector": self.label,
            "clip": self.clip,
            "n": self.n,
            "z0_pct": self.refusal_pct,
            "z1_pct": self.answer_pct,
            "acc_ans_pct": self.acc_ans_pct,
        }


def calibration_table(results: Iterable[ProbeResult], label: str = "inspector") -> list[CalibrationRow]:
    rows = []
    results = list(results)
    for clip in (NON_TARGET, GROUND_TRUTH):
        sel = [r for r in results if r.probe == clip]
        answered = [r for r in sel if r.verdict.z == 1]
        rows.append(
            CalibrationRow(
                label=label,
                clip=clip,
                n=len(sel),
                refused=len(sel) - len(answered),
                answered=len(answered),
                answered_correct=sum(1 for r in answered if r.correct),
            )
        )
    return rows


def _pct(v: float | None) -> str:
    return "-" if v is None else f"{v:.1f}"


def render_calibration(rows: Sequence[CalibrationRow]) -> str:
    header = f"{'Inspector':<24} {'Clip Interval':<14} {'n':>6} {'z=0 (%)':>8} {'z=1 (%)':>8} {'Acc_ans (%)':>12}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.label:<24} {r.clip:<14} {r.n:>6} {_pct(r.refusal_pct):>8} {_pct(r.answer_pct):>8} {_pct(r.acc_ans_pct):>12}"
        )
    return "\n".join(lines)
