# core/metrics.py
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata
from sklearn.metrics import balanced_accuracy_score, f1_score

from core.errors import ContractViolation, EvaluationError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class BootstrapResult:
    low: float
    high: float
    point: float
    replicates: int
    redraws: int = 0
    level: float = 0.95

    def as_dict(self) -> Dict:
        return {"low": self.low, "high": self.high, "point": self.point,
                "replicates": self.replicates, "redraws": self.redraws, "level": self.level}


def _check_inputs(y_true, y_pred, scores) -> tuple:
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise ShapeError(f"{y_true.size} labels but {y_pred.size} predictions")
    if y_true.size == 0:
        raise ContractViolation("classification metrics need at least one sample")
    if scores is not None:
        scores = np.asarray(scores, dtype=np.float64)
        if scores.ndim != 2 or scores.shape[0] != y_true.size:
            raise ShapeError(f"scores of shape {scores.shape} do not match {y_true.size} samples")
        if not np.allclose(scores.sum(axis=1), 1.0, atol=1e-4):
            raise ContractViolation("score rows must be class probabilities summing to 1")
    return y_true, y_pred, scores


def per_class_recall(y_true, y_pred) -> Dict[int, float]:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    return {int(k): float(np.mean(y_pred[y_true == k] == k)) for k in np.unique(y_true)}


def auc_one_vs_rest(y_true, scores) -> tuple:
    """
    Macro one-vs-rest AUC from midranks

    Returns:
        (macro AUC or nan, {class: AUC}, [skipped classes])
    """
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    per_class: Dict[int, float] = {}
    skipped: List[int] = []
    for k in range(scores.shape[1]):
        positive = y_true == k
        n_pos, n_neg = int(positive.sum()), int((~positive).sum())
        if n_pos == 0 or n_neg == 0:
            skipped.append(k)
            continue
        ranks = rankdata(scores[:, k], method="average")
        per_class[k] = float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
    if skipped:
        logger.warning("AUC skipped for classes %s (absent from y_true or no negatives)", skipped)
    macro = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return macro, per_class, skipped


def classification_metrics(y_true, y_pred, scores=None) -> Dict:
    """
    Balanced accuracy, macro F1 and macro one-vs-rest AUC

    Args:
        y_true: True class ids
        y_pred: Predicted class ids
        scores: Optional (N, K) class probabilities; AUC is omitted without them

    Returns:
        Dictionary with BAcc, F1_macro, AUC_OVR, per-class recall and skipped AUC classes
    """
    y_true, y_pred, scores = _check_inputs(y_true, y_pred, scores)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        bacc = float(balanced_accuracy_score(y_true, y_pred))
        f1 = float(f1_score(y_true, y_pred, average="macro", zero_division=0))
    report = {
        "BAcc": bacc,
        "F1_macro": f1,
        "AUC_OVR": None,
        "auc_skipped_classes": [],
        "per_class_recall": per_class_recall(y_true, y_pred),
        "n": int(y_true.size),
    }
    if scores is not None:
        macro, per_class, skipped = auc_one_vs_rest(y_true, scores)
        report["AUC_OVR"] = None if np.isnan(macro) else macro
        report["auc_per_class"] = per_class
        report["auc_skipped_classes"] = skipped
    return report


def metric_function(name: str, num_classes: int) -> Callable[..., float]:
    """Metric on (y_true, y_pred, probs) that is nan whenever a class is missing from y_true"""

    def fn(y_true, y_pred, probs=None) -> float:
        if len(np.unique(y_true)) < num_classes:
            return float("nan")
        if name == "BAcc":
            return float(balanced_accuracy_score(y_true, y_pred))
        if name == "F1_macro":
            return float(f1_score(y_true, y_pred, average="macro", zero_division=0))
        if name == "AUC_OVR":
            return auc_one_vs_rest(y_true, probs)[0]
        raise ContractViolation(f"unknown metric '{name}'")

    return fn


def bootstrap_ci(metric: Callable[..., float], data: Sequence[np.ndarray], replicates: int = 1000,
                 seed: int = 0, level: float = 0.95) -> BootstrapResult:
    """
    Percentile bootstrap interval of `metric(*data)`

    Every replicate resamples the rows of all arrays in `data` together. A
    replicate on which the metric is undefined (nan or ValueError) is redrawn;
    more than 10 x `replicates` redraws is an EvaluationError.
    """
    arrays = [np.asarray(a) for a in data]
    n = len(arrays[0]) if arrays else 0
    if n == 0:
        raise ContractViolation("bootstrap needs non-empty data")
    if any(len(a) != n for a in arrays):
        raise ShapeError("bootstrap arrays differ in length")
    if replicates < 1 or not 0.0 < level < 1.0:
        raise ContractViolation(f"invalid bootstrap settings: replicates={replicates}, level={level}")

    rng = np.random.default_rng(seed)
    point = float(metric(*arrays))
    values: List[float] = []
    redraws = 0
    while len(values) < replicates:
        idx = rng.integers(0, n, n)
        try:
            value = float(metric(*[a[idx] for a in arrays]))
        except ValueError:
            value = float("nan")
        if np.isfinite(value):
            values.append(value)
            continue
        redraws += 1
        if redraws > 10 * replicates:
            raise EvaluationError(f"bootstrap gave up after {redraws} undefined replicates")
    if redraws:
        logger.warning("Bootstrap redrew %d undefined replicates", redraws)
    alpha = (1.0 - level) / 2.0 * 100.0
    low, high = np.percentile(values, [alpha, 100.0 - alpha])
    return BootstrapResult(float(low), float(high), point, replicates, redraws, level)


class PerformanceMetrics:
    """Classification metrics with bootstrap intervals, plus comparison tables across runs"""

    def __init__(self, replicates: int = 1000, seed: int = 0, level: float = 0.95):
        self.replicates = replicates
        self.seed = seed
        self.level = level

    def calculate_all_metrics(self, y_true, y_pred, probs, class_names: List[str]) -> Dict:
        """
        Point metrics and, when replicates > 0, bootstrap intervals for each of them

        Args:
            y_true: True class ids
            y_pred: Predicted class ids
            probs: (N, K) class probabilities
            class_names: Names of the K classes

        Returns:
            Dictionary of point metrics with an 'intervals' entry
        """
        report = classification_metrics(y_true, y_pred, probs)
        report["class_names"] = list(class_names)
        report["intervals"] = {}
        if self.replicates > 0:
            data = (np.asarray(y_true), np.asarray(y_pred), np.asarray(probs))
            for name in ("BAcc", "F1_macro", "AUC_OVR"):
                if report.get(name) is None:
                    continue
                fn = metric_function(name, len(class_names))
                report["intervals"][name] = bootstrap_ci(fn, data, self.replicates, self.seed,
                                                         self.level).as_dict()
        return report

    def compare_models(self, results: Dict[str, Dict]) -> pd.DataFrame:
        """
        Create comparison table for several evaluated models or resolutions

        Args:
            results: Dict of {run name: metrics dict from calculate_all_metrics}

        Returns:
            DataFrame with one row per run
        """
        rows = []
        for name, metrics in results.items():
            row = {"Run": name}
            for key in ("BAcc", "F1_macro", "AUC_OVR"):
                row[key] = metrics.get(key)
                interval = metrics.get("intervals", {}).get(key)
                if interval:
                    row[f"{key} low"] = interval["low"]
                    row[f"{key} high"] = interval["high"]
            rows.append(row)
        return pd.DataFrame(rows)

    def get_best_model(self, comparison_df: pd.DataFrame, metric: str = "BAcc") -> str:
        if comparison_df.empty or comparison_df[metric].isna().all():
            return "N/A"
        return str(comparison_df.loc[comparison_df[metric].idxmax(), "Run"])

    def generate_insights(self, metrics: Dict) -> List[str]:
        insights = [f"Balanced accuracy {metrics['BAcc']:.3f}, macro F1 {metrics['F1_macro']:.3f}"]
        if metrics.get("AUC_OVR") is not None:
            insights.append(f"One-vs-rest AUC {metrics['AUC_OVR']:.3f}")
        if metrics.get("auc_skipped_classes"):
            insights.append(f"AUC skipped for classes {metrics['auc_skipped_classes']}")
        names = metrics.get("class_names", [])
        recalls = metrics.get("per_class_recall", {})
        if recalls:
            worst = min(recalls, key=recalls.get)
            label = names[worst] if worst < len(names) else str(worst)
            insights.append(f"Lowest recall: class '{label}' at {recalls[worst]:.3f}")
        return insights
