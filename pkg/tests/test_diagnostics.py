import json
from importlib import resources

import jsonschema
import pytest

from inspectgate.backend import ScriptedBackend
from inspectgate.diagnostics import (
    EvalRecord,
    accessed_spans,
    aggregate,
    evaluate,
    policy_stats,
    policy_stats_from_overlaps,
    report,
    semantic_groundedness,
    temporal_groundedness,
)
from inspectgate.errors import MissingGold
from inspectgate.timeline import Span

from support import make_question, synthetic_trajectory

JUDGE_OK = json.dumps({"hallucination": False, "trajectory_clarity": 7, "credibility_score": 8, "reasoning": "ok"})
JUDGE_BAD = json.dumps({"hallucination": True, "trajectory_clarity": 2, "credibility_score": 1, "reasoning": "guess"})


def schema():
    return json.loads(resources.files("inspectgate").joinpath("schemas", "metrics.schema.json").read_text())


def four_regimes():
    """One trajectory per (C, G) cell; gold evidence [32, 48], gold answer B."""
    q = make_question()
    trajs = [
        synthetic_trajectory("q", [[(32, 48)]], "B"),  # C=1 G=1
        synthetic_trajectory("q", [[(100, 116)]], "B"),  # C=1 G=0
        synthetic_trajectory("q", [[(32, 48)]], "A"),  # C=0 G=1
        synthetic_trajectory("q", [[(100, 116)]], None),  # C=0 G=0
    ]
    return q, trajs


class TestTemporal:
    def test_threshold_is_inclusive(self):
        # tIoU of [0,1] with [0,20] is exactly 0.05
        assert temporal_groundedness([Span.of(0, 1)], [Span.of(0, 20)]) == (1, 0.05)
        assert temporal_groundedness([Span.of(0, 0.9)], [Span.of(0, 20)])[0] == 0

    def test_missing_gold(self):
        with pytest.raises(MissingGold):
            temporal_groundedness([Span.of(0, 1)], None)

    def test_accessed_spans_dedupe_in_order(self):
        t = synthetic_trajectory("q", [[(10, 20), (0, 5)], [(10, 20)], []], "B")
        assert accessed_spans(t) == [Span.of(10, 20), Span.of(0, 5)]


class TestAggregate:
    def test_four_regime_table(self):
        q, trajs = four_regimes()
        m = aggregate([evaluate(t, q) for t in trajs])
        assert m.regime_counts == {"C1_G1": 1, "C1_G0": 1, "C0_G1": 1, "C0_G0": 1}
        assert (m.accuracy, m.g_t_rate, m.h_t) == (0.5, 0.5, 0.5)
        assert m.recall_at == {"0.05": 0.5, "0.10": 0.5, "0.20": 0.5}

    def test_h_t_null_without_correct_answers(self):
        q = make_question()
        m = aggregate([evaluate(synthetic_trajectory("q", [[(0, 16)]], "A"), q)])
        assert m.h_t is None and m.accuracy == 0.0

    def test_no_gold_makes_temporal_columns_null(self):
        q = make_question(evidence=None)
        m = aggregate([evaluate(synthetic_trajectory("q", [[(0, 16)]], "B"), q)])
        assert m.n_temporal == 0 and m.g_t_rate is None and m.h_t is None
        assert m.recall_at["0.05"] is None and m.accuracy == 1.0

    def test_empty(self):
        m = aggregate([])
        assert m.n == 0 and m.accuracy is None


class TestSemantic:
    def test_judge_drives_g_s(self):
        q, trajs = four_regimes()
        judges = [ScriptedBackend.replies([JUDGE_OK]), ScriptedBackend.replies([JUDGE_BAD]), ScriptedBackend.replies([JUDGE_OK]), None]
        recs = [evaluate(t, q, judge_backend=j) for t, j in zip(trajs, judges)]
        assert [r.g_s for r in recs] == [1, 0, 1, None]
        m = aggregate(recs)
        # correct answers: one grounded, one hallucinated
        assert m.h_s == 0.5 and m.n_semantic == 3

    def test_reask_once_then_ungradable(self):
        q, trajs = four_regimes()
        j = ScriptedBackend.replies(["not json", JUDGE_OK])
        assert semantic_groundedness(q, trajs[0], "B", j)[0] == 1
        assert len(j.calls) == 2 and len(j.calls[1].messages) == 3
        j2 = ScriptedBackend.replies(["nope", "still nope"])
        assert semantic_groundedness(q, trajs[0], "B", j2) == (None, None)

    def test_judge_skipped_for_unanswered(self):
        q, trajs = four_regimes()
        j = ScriptedBackend.replies([])
        assert evaluate(trajs[3], q, judge_backend=j).g_s is None and not j.calls


class TestPolicy:
    def test_hand_counted(self):
        seqs = [[0.3, 0.5], [0.0, 0.2, 0.4], [0.0, 0.0, 0.0], []]
        p = policy_stats_from_overlaps(seqs, 0.05)
        assert p.hit_at == {1: 0.25, 2: 0.5, 3: 0.5}
        # first-step misses: seqs 2, 3, 4; recovered: seq 2
        assert p.recovery == pytest.approx(1 / 3) and p.n_first_miss == 3
        assert (p.iou_med_first, p.iou_med_post) == (0.25, 0.45)

    def test_from_trajectories(self):
        t = synthetic_trajectory("q1", [[], [(100, 116)], [(32, 48)]], "B")
        p = policy_stats([t], {"q1": [Span.of(32, 48)]})
        assert p.hit_at[1] == 0.0 and p.hit_at[3] == 1.0 and p.recovery == 1.0

    def test_questions_without_gold_are_skipped(self):
        t = synthetic_trajectory("q1", [[(0, 16)]], "B")
        assert policy_stats([t], {"q1": None}).n == 0


class TestReport:
    def test_json_validates_against_schema(self):
        q, trajs = four_regimes()
        recs = [evaluate(t, q) for t in trajs]
        text = report(aggregate(recs), policy_stats(trajs, {"q": q.evidence}), "json")
        jsonschema.validate(json.loads(text), schema())

    def test_empty_input_is_header_only(self):
        m = aggregate([])
        table = report(m, policy_stats([], {}), "table")
        assert "n  Acc" in table and "\n0 " not in table
        csv_text = report(m, None, "csv")
        assert csv_text.count("\n") == 1
        jsonschema.validate(json.loads(report(m, None, "json")), schema())

    def test_deterministic(self):
        q, trajs = four_regimes()
        recs = [evaluate(t, q) for t in trajs]
        assert report(aggregate(recs), None, "table") == report(aggregate(recs), None, "table")

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            report(aggregate([]), None, "xml")


def test_eval_record_to_dict():
    r = EvalRecord("q", 1, (Span.of(0, 1),), 1, 0.5)
    assert r.to_dict()["accessed"] == [[0.0, 1.0]]
