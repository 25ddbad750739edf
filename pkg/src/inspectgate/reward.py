"""Terminal rewards over finished trajectories: answer-only and evidence-gated."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Mapping, Sequence

from .diagnostics import DEFAULT_GAMMA, accessed_spans, max_tiou
from .protocol import parse_letters
from .timeline import Span
from .trajectory import QuestionRecord, Trajectory


class Scheme(str, Enum):
    ANSWER_ONLY = "ans"
    EVIDENCE_GATED = "evd"


@dataclass(frozen=True)
class RewardConfig:
    gamma: float = DEFAULT_GAMMA
    scheme: Scheme = Scheme.ANSWER_ONLY
    include_retrieval: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")


def letters_equal(predicted: str | None, gold: str | None, alphabet: str = "ABCDEFGH") -> bool:
    if predicted is None or gold is None:
        return False
    p, g = parse_letters(predicted, alphabet), parse_letters(gold, alphabet)
    if p is None or g is None:
        # free-form answers fall back to a normalized string match
        return predicted.strip().casefold() == gold.strip().casefold()
    return p == g


def r_ans(trajectory: Trajectory, question: QuestionRecord | str | None) -> int:
    gold = question.answer if isinstance(question, QuestionRecord) else question
    alphabet = question.option_letters if isinstance(question, QuestionRecord) and question.options else "ABCDEFGH"
    if not trajectory.outcome.is_answered:
        return 0
    return int(letters_equal(trajectory.outcome.answer, gold, alphabet))


def gate(best: float, gamma: float = DEFAULT_GAMMA) -> float:
    """min(1, best / gamma), divided on the shortest decimal forms of both operands.

    Plain float division turns 0.02 / 0.05 into 0.39999999999999997; exact
    rational division of the decimal forms, rounded once, yields 0.4. repr is
    order-preserving, so the gate stays monotone in ``best``.
    """
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    return float(min(Fraction(1), Fraction(repr(float(best))) / Fraction(repr(float(gamma)))))


def g_evd(
    trajectory: Trajectory, gold: Sequence[Span] | None, gamma: float = DEFAULT_GAMMA, include_retrieval: bool = True
) -> float:
    """Soft overlap gate; raises MissingGold without evidence intervals."""
    return gate(max_tiou(accessed_spans(trajectory, include_retrieval), gold), gamma)


def r_evd(
    trajectory: Trajectory,
    question: QuestionRecord,
    gamma: float = DEFAULT_GAMMA,
    include_retrieval: bool = True,
) -> float:
    return r_ans(trajectory, question) * g_evd(trajectory, question.evidence, gamma, include_retrieval)


def dataset_mean_tiou(trajectories: Sequence[Trajectory], questions: Mapping[str, QuestionRecord]) -> float | None:
    """Mean best tIoU over trajectories with gold evidence, a data-driven gate scale."""
    values = [
        max_tiou(accessed_spans(t), questions[t.question_id].evidence)
        for t in trajectories
        if t.question_id in questions and questions[t.question_id].evidence
    ]
    return sum(values) / len(values) if values else None


@dataclass(frozen=True)
class RewardRow:
    question_id: str
    scheme: str
    status: str
    reward: float | None
    r_ans: int
    g_evd: float | None
    protocol_compliant: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class RewardTable:
    scheme: str
    gamma: float
    rows: tuple[RewardRow, ...]

    @property
    def mean(self) -> float | None:
        vals = [r.reward for r in self.rows if r.reward is not None]
        return sum(vals) / len(vals) if vals else None

    @property
    def n_gradable(self) -> int:
        return sum(1 for r in self.rows if r.reward is not None)

    def to_json(self) -> str:
        doc = {
            "schema": "rewards/1",
            "scheme": self.scheme,
            "gamma": self.gamma,
            "mean": self.mean,
            "n": len(self.rows),
            "n_gradable": self.n_gradable,
            "rows": [r.to_dict() for r in self.rows],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ("question_id", "scheme", "status", "reward", "r_ans", "g_evd", "protocol_compliant")
        w.writerow(cols)
        for r in self.rows:
            w.writerow(["" if getattr(r, c) is None else _fmt(getattr(r, c)) for c in cols])
        w.writerow(["__mean__", self.scheme, "", "" if self.mean is None else _fmt(self.mean), "", "", ""])
        return buf.getvalue()


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def score_batch(
    trajectories: Sequence[Trajectory], questions: Mapping[str, QuestionRecord], config: RewardConfig = RewardConfig()
) -> RewardTable:
    rows = []
    for t in trajectories:
        q = questions.get(t.question_id)
        ans = r_ans(t, q) if q is not None else 0
        gate_value = None
        if q is not None and q.evidence:
            gate_value = g_evd(t, q.evidence, config.gamma, config.include_retrieval)
        if config.scheme is Scheme.ANSWER_ONLY:
            reward = float(ans) if q is not None else None
        else:
            reward = ans * gate_value if gate_value is not None else None
        rows.append(
            RewardRow(
                question_id=t.question_id,
                scheme=config.scheme.value,
                status=t.outcome.status,
                reward=reward,
                r_ans=ans,
                g_evd=gate_value,
                protocol_compliant=int(t.protocol_compliant),
            )
        )
    return RewardTable(config.scheme.value, config.gamma, tuple(rows))
