import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from amigo.exceptions import DegenerateInputError, EvaluationError
from amigo.metrics import (
    KMCurve,
    chi2_sf,
    concordance_index,
    gammaincc,
    kaplan_meier,
    logrank_test,
    stratify_by_median,
    survival_report,
    write_km_csv,
    write_metrics_json,
)

from oracles import brute_force_cindex, hand_km, hand_logrank

survival_sets = st.integers(2, 50).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(1, 20).map(float), min_size=n, max_size=n),
        st.lists(st.booleans(), min_size=n, max_size=n),
        st.lists(st.integers(-5, 5).map(float), min_size=n, max_size=n),
    )
)


def has_admissible(times, events):
    return any(e and ti < tj for ti, e in zip(times, events) for tj in times)


@pytest.fixture
def ten_subjects():
    times_a = [1.0, 2.0, 2.0, 4.0, 6.0]
    events_a = [True, True, False, True, False]
    times_b = [2.0, 3.0, 5.0, 6.0, 7.0]
    events_b = [True, False, True, True, False]
    return times_a, events_a, times_b, events_b


class TestConcordance:
    def test_worked_example(self):
        assert concordance_index([1, 2, 3], [True, True, False], [2, 2, 1]) == pytest.approx(2.5 / 3, abs=1e-15)

    def test_perfect_and_worst(self):
        t = [1.0, 2.0, 3.0, 4.0]
        ev = [True] * 4
        assert concordance_index(t, ev, [4, 3, 2, 1]) == 1.0
        assert concordance_index(t, ev, [1, 2, 3, 4]) == 0.0

    def test_no_admissible_pairs(self):
        with pytest.raises(EvaluationError):
            concordance_index([1.0, 2.0], [False, False], [0.0, 1.0])

    def test_length_mismatch(self):
        with pytest.raises(EvaluationError):
            concordance_index([1.0, 2.0], [True, True], [0.0])

    @settings(max_examples=100, deadline=None)
    @given(survival_sets)
    def test_brute_force_oracle(self, case):
        times, events, risks = case
        if not has_admissible(times, events):
            return
        assert concordance_index(times, events, risks) == brute_force_cindex(times, events, risks)

    @settings(max_examples=60, deadline=None)
    @given(survival_sets)
    def test_monotone_invariance(self, case):
        times, events, risks = case
        if not has_admissible(times, events):
            return
        transformed = np.exp(np.asarray(risks)) * 3.0 + 1.0
        assert concordance_index(times, events, risks) == concordance_index(times, events, transformed)


class TestKaplanMeier:
    def test_single_event(self):
        assert kaplan_meier([1.0], [True]).at(1.0) == 0.0

    def test_all_censored(self):
        curve = kaplan_meier([1.0, 2.0], [False, False])
        assert curve.event_times.size == 0 and curve.at(5.0) == 1.0

    def test_worked_example(self):
        curve = kaplan_meier([1.0, 2.0, 3.0], [True, False, True])
        np.testing.assert_allclose(curve.survival_prob, [2 / 3, 0.0], rtol=1e-15)
        np.testing.assert_array_equal(curve.at_risk, [3, 1])

    def test_empty(self):
        with pytest.raises(DegenerateInputError):
            kaplan_meier([], [])

    def test_median_survival(self):
        curve = KMCurve(np.array([1.0, 3.2, 4.0]), np.array([0.8, 0.45, 0.2]), np.array([5, 3, 1]))
        assert curve.median_survival() == 3.2
        assert KMCurve(np.array([1.0]), np.array([0.9]), np.array([10])).median_survival() is None

    @settings(max_examples=60, deadline=None)
    @given(survival_sets)
    def test_oracle_and_bounds(self, case):
        times, events, _ = case
        curve = kaplan_meier(times, events)
        expected = hand_km(times, events)
        np.testing.assert_allclose(curve.event_times, [t for t, _ in expected])
        np.testing.assert_allclose(curve.survival_prob, [s for _, s in expected], rtol=1e-12)
        assert np.all((curve.survival_prob >= 0) & (curve.survival_prob <= 1))
        assert np.all(np.diff(curve.survival_prob) <= 0)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 20).map(float), min_size=1, max_size=30))
    def test_uncensored_matches_empirical(self, times):
        curve = kaplan_meier(times, [True] * len(times))
        for u, s in zip(curve.event_times, curve.survival_prob):
            assert s == pytest.approx(np.mean(np.asarray(times) > u), abs=1e-12)


class TestLogRank:
    def test_identical_groups(self):
        t = [1.0, 2.0, 3.0]
        e = [True, False, True]
        res = logrank_test(t, e, t, e)
        assert res.chi_square == pytest.approx(0.0, abs=1e-15) and res.p_value == pytest.approx(1.0)

    def test_events_vs_censored(self):
        res = logrank_test([1.0] * 5, [True] * 5, [2.0] * 5, [False] * 5)
        # one event time: n=10, n_a=5, d=5
        expected_a = 5 * 5 / 10
        var = 5 * 0.5 * 0.5 * (10 - 5) / 9
        assert res.chi_square == pytest.approx((5 - expected_a) ** 2 / var, abs=1e-9)

    def test_hand_oracle(self, ten_subjects):
        res = logrank_test(*ten_subjects)
        obs, exp_, var = hand_logrank(*ten_subjects)
        assert res.observed_a == obs
        assert res.expected_a == pytest.approx(exp_, abs=1e-12)
        assert res.variance == pytest.approx(var, abs=1e-12)
        assert res.chi_square == pytest.approx((obs - exp_) ** 2 / var, abs=1e-9)

    def test_symmetry(self, ten_subjects):
        ta, ea, tb, eb = ten_subjects
        assert abs(logrank_test(ta, ea, tb, eb).chi_square - logrank_test(tb, eb, ta, ea).chi_square) <= 1e-10

    @settings(max_examples=60, deadline=None)
    @given(survival_sets, survival_sets)
    def test_symmetry_random(self, a, b):
        if not (any(a[1]) or any(b[1])):
            return
        ab = logrank_test(a[0], a[1], b[0], b[1]).chi_square
        ba = logrank_test(b[0], b[1], a[0], a[1]).chi_square
        assert abs(ab - ba) <= 1e-10

    def test_empty_group(self):
        with pytest.raises(DegenerateInputError):
            logrank_test([1.0], [True], [], [])

    def test_no_events(self):
        with pytest.raises(DegenerateInputError):
            logrank_test([1.0], [False], [2.0], [False])


class TestChiSquare:
    def test_critical_value(self):
        assert chi2_sf(3.841, 1) == pytest.approx(0.05, abs=1e-4)

    @pytest.mark.parametrize("a", [0.5, 1.0, 2.5, 7.0])
    @pytest.mark.parametrize("x", [0.01, 0.3, 1.0, 3.0, 12.0, 60.0])
    def test_against_scipy(self, a, x):
        assert gammaincc(a, x) == pytest.approx(special.gammaincc(a, x), rel=1e-10, abs=1e-300)

    def test_zero(self):
        assert chi2_sf(0.0) == 1.0


class TestStratify:
    def test_simple_split(self):
        s = stratify_by_median([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_array_equal(s.low, [0, 1])
        np.testing.assert_array_equal(s.high, [2, 3])

    def test_median_ties_go_low(self):
        s = stratify_by_median([1.0, 2.0, 2.0, 3.0, 5.0])
        np.testing.assert_array_equal(s.low, [0, 1, 2])
        np.testing.assert_array_equal(s.high, [3, 4])

    def test_all_equal(self):
        s = stratify_by_median([1.0, 1.0, 1.0])
        assert s.high.size == 0
        with pytest.raises(DegenerateInputError):
            survival_report([1.0, 2.0, 3.0], [True, True, True], [1.0, 1.0, 1.0])

    def test_too_few(self):
        with pytest.raises(DegenerateInputError):
            stratify_by_median([1.0])

    def test_group_medians(self):
        s = stratify_by_median([1, 2, 3, 4], [5.0, 6.0, 1.0, 2.0], [True] * 4)
        assert s.median_survival_low == 5.0 and s.median_survival_high == 1.0


class TestExports:
    def test_report_and_files(self, tmp_path):
        times = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
        events = [True, True, False, True, True, False]
        metrics, curves = survival_report(times, events, [6, 5, 4, 3, 2, 1])
        assert set(metrics) == {"c_index", "logrank_chi2", "logrank_p", "median_survival_low", "median_survival_high"}
        assert metrics["c_index"] == 1.0
        path = write_km_csv(curves, tmp_path / "km.csv")
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["group", "time", "survival_prob", "at_risk"]
        assert {r[0] for r in rows[1:]} == {"high", "low"}
        loaded = json.loads(write_metrics_json(metrics, tmp_path / "m.json").read_text())
        assert loaded == metrics
