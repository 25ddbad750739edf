import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inspectgate.errors import EmptyPlan, InvalidSpan, MalformedTimestamp
from inspectgate.timeline import (
    Span,
    Timestamp,
    VideoMeta,
    best_tiou,
    clamp_span,
    clip_grid,
    find_spans,
    merge_spans,
    parse_span,
    parse_timestamp,
    plan_frames,
    tiou,
)


def raster_tiou(a, b, tick=0.01):
    """Independent oracle: count 0.01 s ticks covered by each interval."""
    hi = max(a[1], b[1])
    t = np.arange(0, hi, tick) + tick / 2
    ina = (t >= a[0]) & (t < a[1])
    inb = (t >= b[0]) & (t < b[1])
    union = np.count_nonzero(ina | inb)
    return np.count_nonzero(ina & inb) / union if union else 0.0


class TestTimestamp:
    def test_render_and_parse_round_trip(self):
        assert Timestamp(3725).render() == "01:02:05"
        assert parse_timestamp("01:02:05").seconds == 3725

    def test_render_truncates_fraction(self):
        assert Timestamp(59.9).render() == "00:00:59"

    def test_hours_may_exceed_two_digits(self):
        assert parse_timestamp("100:00:00").seconds == 360000

    @pytest.mark.parametrize("bad", ["1:02:03", "00:60:00", "00:00:61", "aa:bb:cc", "00:00", ""])
    def test_rejects_malformed(self, bad):
        with pytest.raises(MalformedTimestamp):
            parse_timestamp(bad)

    @pytest.mark.parametrize("bad", [-1, float("nan"), float("inf")])
    def test_rejects_negative_or_non_finite(self, bad):
        with pytest.raises(MalformedTimestamp):
            Timestamp(bad)

    @given(st.integers(min_value=0, max_value=10**6))
    def test_round_trip_property(self, s):
        assert parse_timestamp(Timestamp(s).render()).seconds == s


class TestSpan:
    def test_end_must_follow_start(self):
        with pytest.raises(InvalidSpan):
            Span.of(5, 5)

    @pytest.mark.parametrize("sep", ["–", "—", "-", " ~ ", " to "])
    def test_parse_separators(self, sep):
        assert parse_span(f"00:00:10{sep}00:00:20") == Span.of(10, 20)

    def test_label_uses_en_dash(self):
        assert Span.of(10, 20).label() == "00:00:10–00:00:20"

    def test_find_spans_in_prose(self):
        text = "see 00:01:00–00:01:16 and also [00:02:00-00:02:05]."
        assert find_spans(text) == [Span.of(60, 76), Span.of(120, 125)]


class TestTiou:
    def test_examples(self):
        assert tiou(Span.of(0, 10), Span.of(5, 15)) == pytest.approx(5 / 15)
        assert tiou(Span.of(0, 10), Span.of(10, 20)) == 0.0
        assert tiou(Span.of(3, 7), Span.of(3, 7)) == 1.0

    @settings(max_examples=300)
    @given(
        st.integers(0, 99), st.integers(1, 100), st.integers(0, 99), st.integers(1, 100)
    )
    def test_matches_raster_oracle(self, a0, alen, b0, blen):
        a = (a0, min(a0 + alen, 200))
        b = (b0, min(b0 + blen, 200))
        assert tiou(Span.of(*a), Span.of(*b)) == pytest.approx(raster_tiou(a, b), abs=1e-6)

    @given(st.floats(0, 1000), st.floats(0.01, 500), st.floats(0, 1000), st.floats(0.01, 500))
    def test_symmetric_and_bounded(self, a0, al, b0, bl):
        a, b = Span.of(a0, a0 + al), Span.of(b0, b0 + bl)
        v = tiou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == tiou(b, a)

    def test_best_tiou_empty_is_zero(self):
        assert best_tiou([], [Span.of(0, 1)]) == 0.0


class TestClipGrid:
    def test_tail_kept_when_at_least_one_second(self):
        grid = clip_grid(VideoMeta("v", 33))
        assert grid == [Span.of(0, 16), Span.of(16, 32), Span.of(32, 33)]

    def test_tail_dropped_when_shorter_than_one_second(self):
        assert clip_grid(VideoMeta("v", 32.5))[-1] == Span.of(16, 32)

    @given(st.floats(1, 5000))
    def test_grid_is_contiguous(self, duration):
        grid = clip_grid(VideoMeta("v", duration))
        assert grid[0].start_s == 0
        for a, b in zip(grid, grid[1:]):
            assert a.end_s == b.start_s
            assert a.length == 16
        assert duration - grid[-1].end_s < 1


class TestPlanFrames:
    def test_one_fps_over_sixteen_seconds(self):
        plan = plan_frames([Span.of(32, 48)])
        assert plan.seconds() == [float(t) for t in range(32, 48)]

    def test_overlapping_spans_deduplicate(self):
        plan = plan_frames([Span.of(0, 4), Span.of(2, 6)])
        assert plan.seconds() == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]

    def test_cap_keeps_endpoints_and_is_uniform(self):
        plan = plan_frames([Span.of(0, 1000)], cap=5)
        # indices round(i * 999 / 4) for i in 0..4
        assert plan.seconds() == [0.0, 250.0, 500.0, 749.0, 999.0]

    def test_too_short_coverage_raises(self):
        with pytest.raises(EmptyPlan):
            plan_frames([Span.of(0, 0.5)])

    @given(st.lists(st.tuples(st.integers(0, 500), st.integers(1, 60)), min_size=1, max_size=6), st.integers(1, 64))
    def test_sorted_unique_and_capped(self, raw, cap):
        spans = [Span.of(a, a + l) for a, l in raw]
        plan = plan_frames(spans, cap=cap)
        s = plan.seconds()
        assert s == sorted(set(s))
        assert 1 <= len(s) <= cap
        assert all(any(sp.start_s <= t < sp.end_s for sp in spans) for t in s)


def test_merge_and_clamp():
    assert merge_spans([Span.of(5, 10), Span.of(0, 5), Span.of(20, 30)]) == [Span.of(0, 10), Span.of(20, 30)]
    assert clamp_span(Span.of(90, 120), 100) == Span.of(90, 100)
    assert clamp_span(Span.of(100, 120), 100) is None
    assert math.isclose(Span.of(1.5, 4).length, 2.5)
