import random

import pytest

from inspectgate.backend import ConstantBackend, ScriptedBackend
from inspectgate.calibration import (
    GROUND_TRUTH,
    NON_TARGET,
    ProbeResult,
    calibration_probe,
    calibration_table,
    groundtruth_clip,
    nontarget_clip,
    render_calibration,
)
from inspectgate.errors import MissingGold, NoDisjointClip
from inspectgate.protocol import FIXED_RANGE_LINE, extract_spans_label, parse_inspector
from inspectgate.timeline import Span, tiou

from support import make_index, make_question, verdict


def q600():
    return make_question(duration_s=600, evidence=((100, 130),))


def test_clip_placement_oracle():
    q = q600()
    for seed in range(50):
        rng = random.Random(seed)
        nt = nontarget_clip(q, rng)
        gt = groundtruth_clip(q, rng)
        assert nt.length == 16 and tiou(nt, Span.of(100, 130)) == 0.0
        assert min(nt.end_s, 130) - max(nt.start_s, 100) <= 0
        assert 100 <= gt.start_s and gt.end_s <= 130 and gt.length == 16


def test_seed_changes_nontarget_clip():
    q = q600()
    picks = {nontarget_clip(q, random.Random(s)) for s in range(20)}
    assert len(picks) > 1


def test_no_disjoint_clip():
    q = make_question(duration_s=170, evidence=((0, 160),))
    with pytest.raises(NoDisjointClip):
        nontarget_clip(q, random.Random(0))


def test_missing_gold():
    with pytest.raises(MissingGold):
        groundtruth_clip(make_question(evidence=None), random.Random(0))


def test_short_evidence_window_is_centred():
    q = make_question(duration_s=600, evidence=((100, 104),))
    assert groundtruth_clip(q, random.Random(0)) == Span.of(94, 110)


def test_probe_uses_fixed_range_and_index_grid():
    q = make_question(duration_s=160, evidence=((32, 48),))
    inspector = ScriptedBackend.replies([verdict("SEARCH_MORE", 0.1), verdict("B", 0.5)])
    nt, gt = calibration_probe(q, make_index(), inspector, seed=7)
    for call in inspector.calls:
        assert FIXED_RANGE_LINE in call.prompt
    assert extract_spans_label(inspector.calls[0].prompt) == [nt.span]
    assert nt.verdict.z == 0 and nt.correct is None
    # fixed-range answers below the gate still count as refusals: the engine gate decides z
    assert gt.verdict.z == 0


def test_aggregation_counts():
    yes_right = parse_inspector(verdict("B", 0.99))
    no = parse_inspector(verdict("SEARCH_MORE", 0.1))
    results = [ProbeResult("q", NON_TARGET, Span.of(0, 16), no, None) for _ in range(3)]
    results.append(ProbeResult("q", NON_TARGET, Span.of(0, 16), yes_right, True))
    rows = calibration_table(results, "scripted")
    nt, gt = rows
    assert (nt.refusal_pct, nt.answer_pct, nt.acc_ans_pct) == (75.0, 25.0, 100.0)
    assert gt.n == 0 and gt.refusal_pct is None
    text = render_calibration(rows)
    assert "Non-target" in text and "75.0" in text and GROUND_TRUTH in text
