import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import brute_force_auroc, brute_force_c_index

from psgbench.metrics import (
    MetricReport,
    auroc,
    auroc_multiclass,
    bootstrap_ci,
    c_index,
    mae_years,
    write_reports_csv,
    write_reports_json,
)


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc(np.array([0.9, 0.8, 0.3, 0.1]), np.array([1, 1, 0, 0])) == 1.0

    def test_half_concordant_pairs(self):
        # 2 of 4 pairs concordant
        assert auroc(np.array([0.9, 0.2, 0.8, 0.1]), np.array([1, 0, 0, 1])) == 0.5

    def test_all_ties_give_half(self):
        assert auroc(np.ones(6), np.array([1, 0, 1, 0, 1, 0])) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="classes"):
            auroc(np.array([0.1, 0.2]), np.array([1, 1]))

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = rng.integers(3, 51)
            scores = np.round(rng.standard_normal(n), 1)  # coarse grid forces ties
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            assert abs(auroc(scores, labels) - brute_force_auroc(scores, labels)) < 1e-12

    @given(st.integers(min_value=1, max_value=5), st.floats(min_value=0.1, max_value=10))
    @settings(max_examples=25, deadline=None)
    def test_invariant_under_increasing_transforms(self, seed, scale):
        rng = np.random.default_rng(seed)
        scores = rng.standard_normal(30)
        labels = rng.integers(0, 2, 30)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        base = auroc(scores, labels)
        assert auroc(scale * scores + 3.0, labels) == base
        assert auroc(np.exp(scores), labels) == base


class TestAurocMulticlass:
    def test_perfect_classifier(self):
        labels = np.repeat(np.arange(5), 10)
        scores = np.eye(5)[labels]
        macro, per_class = auroc_multiclass(scores, labels)
        assert macro == 1.0
        assert all(v == 1.0 for v in per_class.values())

    def test_macro_is_mean_of_present_stages(self):
        rng = np.random.default_rng(1)
        labels = np.array([0, 0, 1, 1, 2, 2, 3, 3, 4, 4] * 5)
        scores = rng.random((50, 5))
        macro, per_class = auroc_multiclass(scores, labels)
        assert abs(macro - np.mean([per_class[k] for k in range(5)])) < 1e-12

    def test_absent_stage_skipped(self):
        labels = np.array([0, 0, 1, 1])
        scores = np.random.default_rng(0).random((4, 5))
        macro, per_class = auroc_multiclass(scores, labels)
        assert per_class[4] is None

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(2)
        n = 10_000
        labels = rng.integers(0, 5, n)
        scores = rng.random((n, 5))
        macro, _ = auroc_multiclass(scores, labels)
        assert abs(macro - 0.5) < 0.02


class TestMae:
    def test_exact_match(self):
        assert mae_years(np.array([50.0]), np.array([50.0])) == 0.0

    def test_constant_bias(self):
        target = np.array([30.0, 40.0, 50.0])
        assert mae_years(target + 2.0, target) == 2.0

    def test_mixed_errors(self):
        assert mae_years(np.array([40.0, 60.0]), np.array([50.0, 50.0])) == 10.0


class TestCIndex:
    def test_perfectly_anti_ranked(self):
        times = np.array([1.0, 2.0, 3.0, 4.0])
        hazards = np.array([4.0, 3.0, 2.0, 1.0])  # earliest event, highest hazard
        events = np.ones(4)
        assert c_index(hazards, events, times) == 1.0

    def test_worked_example_two_thirds(self):
        value = c_index(np.array([3.0, 1.0, 2.0]), np.array([1, 1, 0]), np.array([1.0, 2.0, 3.0]))
        assert abs(value - 2 / 3) < 1e-12

    def test_all_tied_hazards(self):
        value = c_index(np.zeros(4), np.ones(4), np.array([1.0, 2.0, 3.0, 4.0]))
        assert value == 0.5

    def test_no_comparable_pairs_rejected(self):
        with pytest.raises(ValueError, match="comparable"):
            c_index(np.array([1.0, 2.0]), np.array([0, 0]), np.array([1.0, 2.0]))

    def test_matches_brute_force_censored(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            n = rng.integers(3, 51)
            hazards = np.round(rng.standard_normal(n), 1)
            events = rng.integers(0, 2, n)
            times = np.round(rng.uniform(0.5, 20.0, n), 1)  # duplicate times likely
            try:
                expected = brute_force_c_index(hazards, events, times)
            except ValueError:
                continue
            assert abs(c_index(hazards, events, times) - expected) < 1e-12

    def test_invariant_under_increasing_hazard_transforms(self):
        rng = np.random.default_rng(4)
        hazards = rng.standard_normal(40)
        events = rng.integers(0, 2, 40)
        events[0] = 1
        times = rng.uniform(0.5, 10.0, 40)
        base = c_index(hazards, events, times)
        assert c_index(np.exp(hazards), events, times) == base
        assert c_index(2.5 * hazards + 7.0, events, times) == base
        assert c_index(hazards + 100.0, events, times) == base


class TestBootstrapCi:
    def test_constant_metric_collapses(self):
        lo, hi = bootstrap_ci(lambda x: 5.0, (np.arange(30),), n_boot=200, seed=0)
        assert lo == hi == 5.0

    def test_ci_brackets_point_estimate_for_mean(self):
        rng = np.random.default_rng(1)
        data = rng.standard_normal(200)
        lo, hi = bootstrap_ci(np.mean, (data,), n_boot=500, seed=2)
        assert lo <= data.mean() <= hi

    def test_coverage_on_gaussian_mean(self):
        # 95% interval should cover the true mean 93-97% of the time.
        rng = np.random.default_rng(7)
        hits = 0
        trials = 500
        for t in range(trials):
            data = rng.standard_normal(100)
            lo, hi = bootstrap_ci(np.mean, (data,), n_boot=200, seed=t)
            hits += int(lo <= 0.0 <= hi)
        assert 0.93 * trials <= hits <= 0.97 * trials

    def test_undefined_resamples_are_redrawn(self):
        scores = np.array([0.9, 0.8, 0.1, 0.2, 0.7])
        labels = np.array([1, 1, 0, 0, 1])  # resamples often single-class
        lo, hi = bootstrap_ci(auroc, (scores, labels), n_boot=300, seed=3)
        assert 0.0 <= lo <= hi <= 1.0

    def test_too_few_resamples_rejected(self):
        with pytest.raises(ValueError, match="100"):
            bootstrap_ci(np.mean, (np.arange(10),), n_boot=50)

    def test_deterministic_under_seed(self):
        data = np.random.default_rng(5).standard_normal(50)
        a = bootstrap_ci(np.mean, (data,), n_boot=150, seed=11)
        b = bootstrap_ci(np.mean, (data,), n_boot=150, seed=11)
        assert a == b


class TestMetricReport:
    def test_ci_must_bracket_value(self):
        with pytest.raises(ValueError, match="bracket"):
            MetricReport(task="age", method="m", metric="mae", value=5.0, ci_low=6.0, ci_high=7.0)

    def test_writers_round_trip(self, tmp_path):
        rows = [
            MetricReport(task="apnea", method="cl_loo", metric="auroc", value=0.8,
                         ci_low=0.7, ci_high=0.9, seed=1),
            MetricReport(task="age", method="baseline_time", metric="mae_years", value=8.1),
        ]
        csv_path = write_reports_csv(rows, tmp_path / "r.csv")
        json_path = write_reports_json(rows, tmp_path / "r.json")
        lines = csv_path.read_text().strip().splitlines()
        assert len(lines) == 3
        assert lines[0].startswith("task,method,metric,value")
        import json

        parsed = json.loads(json_path.read_text())
        assert parsed[0]["metric"] == "auroc"
        assert parsed[1]["ci_low"] is None
