import logging

import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import roc_auc_score

from core.errors import ContractViolation, EvaluationError, ShapeError
from core.metrics import (PerformanceMetrics, auc_one_vs_rest, bootstrap_ci, classification_metrics,
                          metric_function)


def _oracle_bacc(y_true, y_pred):
    return np.mean([np.mean(y_pred[y_true == k] == k) for k in np.unique(y_true)])


def _oracle_f1(y_true, y_pred):
    scores = []
    for k in np.union1d(y_true, y_pred):
        tp = np.sum((y_pred == k) & (y_true == k))
        fp = np.sum((y_pred == k) & (y_true != k))
        fn = np.sum((y_pred != k) & (y_true == k))
        scores.append(2 * tp / (2 * tp + fp + fn))
    return np.mean(scores)


def _random_cases(count, seed):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        k = int(rng.integers(1, 5))
        n = int(rng.integers(1, 21))
        yield rng.integers(0, k, n), rng.integers(0, k, n)


class TestPointMetrics:
    def test_perfect_predictor(self):
        y = np.array([0, 1, 2, 0, 1, 2])
        probs = np.eye(3)[y]
        report = classification_metrics(y, y, probs)
        assert report["BAcc"] == 1.0
        assert report["F1_macro"] == 1.0
        assert report["AUC_OVR"] == 1.0

    def test_constant_predictor(self):
        y_true = np.array([0, 0, 1, 1])
        report = classification_metrics(y_true, np.zeros(4, int))
        assert report["BAcc"] == pytest.approx(0.5)
        assert report["F1_macro"] == pytest.approx(1 / 3)
        assert report["AUC_OVR"] is None

    def test_known_confusion(self):
        y_true = np.repeat([0, 1, 2], 10)
        y_pred = y_true.copy()
        y_pred[[0, 1]] = 1
        y_pred[[10]] = 2
        y_pred[[20, 21, 22]] = 0
        report = classification_metrics(y_true, y_pred)
        assert report["per_class_recall"] == {0: pytest.approx(0.8), 1: pytest.approx(0.9), 2: pytest.approx(0.7)}
        assert report["BAcc"] == pytest.approx(0.8, abs=1e-12)

    @pytest.mark.parametrize("count, seed", [(300, 0)])
    def test_matches_brute_force(self, count, seed):
        for y_true, y_pred in _random_cases(count, seed):
            report = classification_metrics(y_true, y_pred)
            assert report["BAcc"] == pytest.approx(_oracle_bacc(y_true, y_pred), abs=1e-12)
            assert report["F1_macro"] == pytest.approx(_oracle_f1(y_true, y_pred), abs=1e-12)

    @pytest.mark.slow
    def test_matches_brute_force_exhaustively(self):
        for y_true, y_pred in _random_cases(10_000, 1):
            report = classification_metrics(y_true, y_pred)
            assert report["BAcc"] == pytest.approx(_oracle_bacc(y_true, y_pred), abs=1e-12)
            assert report["F1_macro"] == pytest.approx(_oracle_f1(y_true, y_pred), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            classification_metrics([0, 1], [0])

    def test_empty(self):
        with pytest.raises(ContractViolation):
            classification_metrics([], [])

    def test_scores_must_be_probabilities(self):
        with pytest.raises(ContractViolation):
            classification_metrics([0, 1], [0, 1], np.array([[0.9, 0.9], [0.1, 0.1]]))


class TestAUC:
    def test_ties_take_midranks(self):
        macro, per_class, skipped = auc_one_vs_rest(np.array([0, 1, 0, 1]), np.full((4, 2), 0.5))
        assert macro == pytest.approx(0.5)
        assert skipped == []

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_sklearn_binary(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, 40)
        y[:2] = [0, 1]
        p1 = np.round(rng.random(40), 1)
        probs = np.stack([1 - p1, p1], axis=1)
        _, per_class, _ = auc_one_vs_rest(y, probs)
        assert per_class[1] == pytest.approx(roc_auc_score(y, p1))

    def test_absent_class_is_skipped(self, caplog):
        probs = np.array([[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1]])
        with caplog.at_level(logging.WARNING):
            report = classification_metrics([0, 1, 0], [0, 1, 0], probs)
        assert report["auc_skipped_classes"] == [2]
        assert report["AUC_OVR"] == pytest.approx(1.0)
        assert "AUC skipped" in caplog.text


class TestBootstrap:
    def test_constant_metric_has_zero_width(self):
        result = bootstrap_ci(lambda y: 0.42, (np.arange(10),), replicates=50)
        assert result.low == result.high == result.point == 0.42

    def test_same_seed_same_interval(self):
        rng = np.random.default_rng(0)
        data = (rng.integers(0, 2, 60), rng.integers(0, 2, 60))
        fn = metric_function("BAcc", 2)
        assert bootstrap_ci(fn, data, 100, seed=3) == bootstrap_ci(fn, data, 100, seed=3)

    def test_coin_flip_interval_covers_chance(self):
        rng = np.random.default_rng(1)
        y_true = np.repeat([0, 1], 500)
        y_pred = rng.integers(0, 2, 1000)
        result = bootstrap_ci(metric_function("BAcc", 2), (y_true, y_pred), replicates=1000, seed=0)
        assert result.low <= 0.5 <= result.high
        assert result.low <= result.point <= result.high

    def test_undefined_replicates_are_redrawn(self):
        y_true = np.array([1] + [0] * 19)
        y_pred = np.zeros(20, int)
        result = bootstrap_ci(metric_function("BAcc", 2), (y_true, y_pred), replicates=50, seed=0)
        assert result.redraws > 0
        assert result.replicates == 50

    def test_gives_up_on_undefined_metric(self):
        with pytest.raises(EvaluationError):
            bootstrap_ci(lambda y: float("nan"), (np.arange(5),), replicates=5)

    def test_empty_data(self):
        with pytest.raises(ContractViolation):
            bootstrap_ci(lambda y: 0.0, (np.array([]),))

    def test_unknown_metric(self):
        with pytest.raises(ContractViolation):
            metric_function("accuracy", 2)([0, 1], [0, 1])


class TestPerformanceMetrics:
    @pytest.fixture
    def evaluated(self):
        rng = np.random.default_rng(0)
        y_true = np.repeat([0, 1], 20)
        probs = np.clip(np.eye(2)[y_true] * 0.6 + rng.random((40, 2)) * 0.4, 1e-3, None)
        probs /= probs.sum(axis=1, keepdims=True)
        return y_true, probs.argmax(axis=1), probs

    def test_intervals_for_every_metric(self, evaluated):
        report = PerformanceMetrics(replicates=30).calculate_all_metrics(*evaluated, ["normal", "drusen"])
        assert set(report["intervals"]) == {"BAcc", "F1_macro", "AUC_OVR"}
        assert report["class_names"] == ["normal", "drusen"]

    def test_no_intervals_without_replicates(self, evaluated):
        report = PerformanceMetrics(replicates=0).calculate_all_metrics(*evaluated, ["a", "b"])
        assert report["intervals"] == {}

    def test_comparison_and_best(self, evaluated):
        pm = PerformanceMetrics(replicates=20)
        good = pm.calculate_all_metrics(*evaluated, ["a", "b"])
        bad = pm.calculate_all_metrics(evaluated[0], 1 - evaluated[0], evaluated[2][:, ::-1], ["a", "b"])
        table = pm.compare_models({"32px": good, "64px": bad})
        assert list(table["Run"]) == ["32px", "64px"]
        assert {"BAcc low", "BAcc high"} <= set(table.columns)
        assert pm.get_best_model(table) == "32px"

    def test_best_of_empty_table(self):
        assert PerformanceMetrics().get_best_model(pd.DataFrame({"Run": [], "BAcc": []})) == "N/A"

    def test_insights_name_the_weakest_class(self, evaluated):
        pm = PerformanceMetrics(replicates=0)
        y_true, _, probs = evaluated
        report = pm.calculate_all_metrics(y_true, np.zeros_like(y_true), probs, ["normal", "drusen"])
        insights = pm.generate_insights(report)
        assert insights[0].startswith("Balanced accuracy 0.500")
        assert any("'drusen'" in line for line in insights)
