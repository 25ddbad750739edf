"""Evidence-grounding diagnostics over finished trajectories."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

from .backend import ChatRequest, Message
from .engine import judge_log
from .errors import BackendError, JudgeParseError, MissingGold
from .protocol import JudgeVerdict, parse_judge, render_judge_prompt
from .timeline import Span, tiou
from .trajectory import Fallback, Inspected, QuestionRecord, Retrieved, Trajectory, accessed_by_turn

DEFAULT_GAMMA = 0.05
RECALL_THRESHOLDS = (0.05, 0.10, 0.20)
REGIMES = ("C1_G1", "C1_G0", "C0_G1", "C0_G0")


def accessed_spans(trajectory: Trajectory, include_retrieval: bool = True) -> list[Span]:
    out: list[Span] = []
    seen: set[Span] = set()
    for e in trajectory.events:
        if isinstance(e, (Inspected, Fallback)):
            spans = e.spans
        elif isinstance(e, Retrieved) and include_retrieval:
            spans = e.summary.useful_spans if e.summary else ()
        else:
            continue
        for s in spans:
            if s not in seen:
                seen.add(s)
                out.append(s)
    return out


def max_tiou(spans: Iterable[Span], gold: Sequence[Span] | None) -> float:
    if not gold:
        raise MissingGold("no gold evidence intervals")
    return max((tiou(s, g) for s in spans for g in gold), default=0.0)


def temporal_groundedness(
    spans: Sequence[Span], gold: Sequence[Span] | None, gamma: float = DEFAULT_GAMMA
) -> tuple[int, float]:
    best = max_tiou(spans, gold)
    return int(best >= gamma), best


def semantic_groundedness(
    question: QuestionRecord, trajectory: Trajectory, final_answer: str, judge_backend, model_id: str = ""
) -> tuple[int | None, JudgeVerdict | None]:
    """Ask the judge whether the tool outputs entail the answer; one re-ask on bad JSON.

    Returns (None, None) when the judge output stays unparseable.
    """
    prompt = render_judge_prompt(question.text, judge_log(trajectory), final_answer)
    messages = [Message("user", prompt)]
    for attempt in range(2):
        text = judge_backend.chat(ChatRequest(tuple(messages), model_id=model_id, temperature=0.0, purpose="judge"))
        try:
            verdict = parse_judge(text)
        except JudgeParseError as exc:
            messages += [
                Message("assistant", text),
                Message("user", f"Your output was not usable ({exc}). Return valid JSON exactly in the required schema, nothing else."),
            ]
            continue
        return 1 - int(verdict.hallucination), verdict
    return None, None


@dataclass(frozen=True)
class EvalRecord:
    question_id: str
    correct: int
    accessed: tuple[Span, ...] = ()
    g_t: int | None = None
    best_tiou: float | None = None
    g_s: int | None = None
    judge: JudgeVerdict | None = None

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "C": self.correct,
            "accessed": [s.to_list() for s in self.accessed],
            "G_t": self.g_t,
            "best_tiou": self.best_tiou,
            "G_s": self.g_s,
            "judge": self.judge.to_dict() if self.judge else None,
        }


def evaluate(
    trajectory: Trajectory,
    question: QuestionRecord,
    gamma: float = DEFAULT_GAMMA,
    judge_backend=None,
    include_retrieval: bool = True,
) -> EvalRecord:
    from .reward import r_ans

    correct = r_ans(trajectory, question)
    spans = accessed_spans(trajectory, include_retrieval)
    g_t = best = None
    if question.evidence:
        g_t, best = temporal_groundedness(spans, question.evidence, gamma)
    g_s = verdict = None
    if judge_backend is not None and trajectory.outcome.is_answered:
        try:
            g_s, verdict = semantic_groundedness(question, trajectory, trajectory.outcome.answer, judge_backend)
        except BackendError:
            g_s, verdict = None, None
    return EvalRecord(trajectory.question_id, correct, tuple(spans), g_t, best, g_s, verdict)


def _rate(num: float, den: float) -> float | None:
    return num / den if den else None


@dataclass(frozen=True)
class AggregateMetrics:
    n: int
    accuracy: float | None
    n_temporal: int
    g_t_rate: float | None
    h_t: float | None
    n_semantic: int
    g_s_rate: float | None
    h_s: float | None
    recall_at: dict[str, float | None]
    regime_counts: dict[str, int]
    gamma: float = DEFAULT_GAMMA

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate(
    records: Sequence[EvalRecord], gamma: float = DEFAULT_GAMMA, thresholds: Sequence[float] = RECALL_THRESHOLDS
) -> AggregateMetrics:
    """Corpus-level rates. Ungradable records leave the relevant denominator."""
    n = len(records)
    temporal = [r for r in records if r.g_t is not None]
    semantic = [r for r in records if r.g_s is not None]
    regimes = {k: 0 for k in REGIMES}
    for r in temporal:
        regimes[f"C{r.correct}_G{r.g_t}"] += 1
    return AggregateMetrics(
        n=n,
        accuracy=_rate(sum(r.correct for r in records), n),
        n_temporal=len(temporal),
        g_t_rate=_rate(sum(r.g_t for r in temporal), len(temporal)),
        h_t=_rate(sum(r.correct * (1 - r.g_t) for r in temporal), sum(r.correct for r in temporal)),
        n_semantic=len(semantic),
        g_s_rate=_rate(sum(r.g_s for r in semantic), len(semantic)),
        h_s=_rate(sum(r.correct * (1 - r.g_s) for r in semantic), sum(r.correct for r in semantic)),
        recall_at={
            f"{t:.2f}": _rate(sum(1 for r in temporal if r.best_tiou >= t), len(temporal)) for t in thresholds
        },
        regime_counts=regimes,
        gamma=gamma,
    )


@dataclass(frozen=True)
class PolicyStats:
    n: int
    hit_at: dict[int, float | None]
    recovery: float | None
    n_first_miss: int
    iou_med_first: float | None
    iou_med_post: float | None
    n_hit: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hit_at"] = {str(k): v for k, v in self.hit_at.items()}
        return d


def step_overlaps(trajectory: Trajectory, gold: Sequence[Span], include_retrieval: bool = True) -> list[float]:
    """m_t per step: best tIoU of that step's spans, 0 for a step with none."""
    return [max((tiou(s, g) for s in spans for g in gold), default=0.0) for _, spans in accessed_by_turn(trajectory, include_retrieval)]


def policy_stats_from_overlaps(sequences: Sequence[Sequence[float]], gamma: float = DEFAULT_GAMMA, ks=(1, 2, 3)) -> PolicyStats:
    n = len(sequences)
    hit_at = {}
    for k in ks:
        hit_at[k] = _rate(sum(1 for m in sequences if any(x >= gamma for x in m[:k])), n)
    first_miss = [m for m in sequences if not m or m[0] < gamma]
    recovered = sum(1 for m in first_miss if any(x >= gamma for x in m[1:]))
    firsts, posts = [], []
    for m in sequences:
        t_hit = next((i for i, x in enumerate(m) if x >= gamma), None)
        if t_hit is None:
            continue
        firsts.append(m[t_hit])
        posts.append(max(m[t_hit:]))
    return PolicyStats(
        n=n,
        hit_at=hit_at,
        recovery=_rate(recovered, len(first_miss)),
        n_first_miss=len(first_miss),
        iou_med_first=statistics.median(firsts) if firsts else None,
        iou_med_post=statistics.median(posts) if posts else None,
        n_hit=len(firsts),
    )


def policy_stats(
    trajectories: Sequence[Trajectory],
    golds: Mapping[str, Sequence[Span] | None],
    gamma: float = DEFAULT_GAMMA,
    include_retrieval: bool = True,
) -> PolicyStats:
    sequences = [
        step_overlaps(t, golds[t.question_id], include_retrieval) for t in trajectories if golds.get(t.question_id)
    ]
    return policy_stats_from_overlaps(sequences, gamma)


# --- reporting ----------------------------------------------------------------------------


def _pct(v: float | None) -> str:
    return "-" if v is None else f"{100 * v:.1f}"


def _num(v: float | None) -> str:
    return "-" if v is None else f"{v:.2f}"


METRIC_COLUMNS = ("n", "Acc", "G_t", "H_t", "R@0.05", "R@0.10", "R@0.20", "G_s", "H_s")
REGIME_COLUMNS = ("C=1,G=1", "C=1,G=0", "C=0,G=1", "C=0,G=0")
POLICY_COLUMNS = ("Hit@1", "Hit@2", "Hit@3", "Recovery", "IoU_med")


def _row(cells: Sequence[str], widths: Sequence[int]) -> str:
    return "  ".join(c.rjust(w) for c, w in zip(cells, widths)).rstrip()


def _table(columns: Sequence[str], rows: Sequence[Sequence[str]]) -> list[str]:
    widths = [max([len(c)] + [len(r[i]) for r in rows]) for i, c in enumerate(columns)]
    out = [_row(columns, widths), _row(["-" * w for w in widths], widths)]
    out += [_row(r, widths) for r in rows]
    return out


def metric_cells(m: AggregateMetrics) -> list[str]:
    return [
        str(m.n),
        _pct(m.accuracy),
        _pct(m.g_t_rate),
        _pct(m.h_t),
        *(_pct(m.recall_at.get(f"{t:.2f}")) for t in RECALL_THRESHOLDS),
        _pct(m.g_s_rate),
        _pct(m.h_s),
    ]


def policy_cells(p: PolicyStats) -> list[str]:
    iou = "-" if p.iou_med_first is None else f"{_num(p.iou_med_first)}->{_num(p.iou_med_post)}"
    return [_pct(p.hit_at.get(1)), _pct(p.hit_at.get(2)), _pct(p.hit_at.get(3)), _pct(p.recovery), iou]


def report(metrics: AggregateMetrics | None, stats: PolicyStats | None, format: str = "table") -> str:
    if format == "json":
        doc = {
            "schema": "metrics/1",
            "metrics": metrics.to_dict() if metrics else None,
            "policy": stats.to_dict() if stats else None,
        }
        return json.dumps(doc, indent=2, sort_keys=True)
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS + REGIME_COLUMNS + POLICY_COLUMNS)
        if metrics is not None and metrics.n:
            regimes = [str(metrics.regime_counts[k]) for k in REGIMES]
            policy = policy_cells(stats) if stats else ["-"] * len(POLICY_COLUMNS)
            w.writerow(metric_cells(metrics) + regimes + policy)
        return buf.getvalue()
    if format != "table":
        raise ValueError(f"unknown report format {format!r}")

    has_rows = metrics is not None and metrics.n > 0
    lines = ["Grounding (rates in %)"]
    lines += _table(METRIC_COLUMNS, [metric_cells(metrics)] if has_rows else [])
    lines += ["", "Regimes (temporally gradable records)"]
    lines += _table(REGIME_COLUMNS, [[str(metrics.regime_counts[k]) for k in REGIMES]] if has_rows else [])
    lines += ["", "Trajectory policy (rates in %)"]
    lines += _table(POLICY_COLUMNS, [policy_cells(stats)] if stats is not None and stats.n else [])
    return "\n".join(lines) + "\n"
