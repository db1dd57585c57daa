"""Reward history, moving averages, and the trained criterion."""

from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from trialworks.metrics import MetricsError, MetricsSink, RewardHistory


class TestRewardHistory:
    def test_constant_sequence_average_is_constant(self):
        history = RewardHistory("x")
        for _ in range(10):
            history.record(1.0)
        assert history.moving_average() == 1.0

    def test_undefined_before_window_fills(self):
        history = RewardHistory("x")
        for _ in range(9):
            history.record(1.0)
        assert history.moving_average() is None
        assert history.is_trained() is False

    def test_window_slides(self):
        history = RewardHistory("x")
        for value in [0.0] * 5 + [1.0] * 10:
            history.record(value)
        assert history.moving_average() == 1.0

    def test_non_finite_rejected(self):
        history = RewardHistory("x")
        with pytest.raises(MetricsError):
            history.record(float("nan"))
        with pytest.raises(MetricsError):
            history.record(float("inf"))

    def test_threshold_is_strict(self):
        history = RewardHistory("x", threshold=0.5)
        for _ in range(10):
            history.record(0.5)
        assert history.is_trained() is False
        history.record(0.5 + 1e-9)
        # window now holds nine 0.5s and one 0.5+eps: mean just above 0.5
        assert history.is_trained() is True

    @given(st.lists(st.floats(-5, 5), min_size=10, max_size=10),
           st.integers(0, 9), st.floats(0.001, 2.0))
    def test_monotone_in_final_window(self, tail, index, bump):
        base = RewardHistory("x", threshold=0.25)
        raised = RewardHistory("x", threshold=0.25)
        for i, value in enumerate(tail):
            base.record(value)
            raised.record(value + bump if i == index else value)
        if base.is_trained():
            assert raised.is_trained()


class TestMetricsSink:
    def test_record_and_flags(self):
        sink = MetricsSink(threshold=0.5)
        for i in range(12):
            sink.record_trial_total("heuristic_v1", 0.9)
            sink.record_trial_total("random_v1", -0.5)
        assert sink.is_trained("heuristic_v1") is True
        assert sink.is_trained("random_v1") is False
        assert sink.is_trained("missing") is False

    def test_threshold_override(self):
        sink = MetricsSink(threshold=0.5)
        for _ in range(10):
            sink.record_trial_total("x", 0.4)
        assert sink.is_trained("x") is False
        assert sink.is_trained("x", threshold=0.3) is True

    def test_render_table_one_line_per_implementation(self):
        sink = MetricsSink()
        for _ in range(10):
            sink.record_trial_total("b_impl", 1.0)
        sink.record_trial_total("a_impl", -0.25)
        table = sink.render_table()
        lines = table.strip().splitlines()
        assert lines[0].startswith("#")
        assert lines[1] == "a_impl 1 -0.25 - false"
        assert lines[2] == "b_impl 10 1 1 true"
