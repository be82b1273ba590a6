# core/ablation.py
"""Compare pre-training strategies: none, single resolution, the full ladder."""
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd

from core.data import Dataset
from core.detection import auto_prototype, cases_from_model, evaluate_detection, lesion_class
from core.errors import ConfigError
from core.metrics import classification_metrics
from core.model import ProtoModel
from core.training import TrainConfig, TrainingLog, finetune, predict, pretrain

logger = logging.getLogger(__name__)

STRATEGIES = ("none", "single", "multi")


@dataclass
class AblationResult:
    strategy: str
    resolutions: List[int]
    val_BAcc: float
    test_BAcc: float
    test_F1: float
    prototype: int
    AP_top1: float
    baseline_AP: float


def strategy_config(config: TrainConfig, strategy: str) -> TrainConfig:
    """Single-resolution pre-training keeps the total epoch budget of the full ladder"""
    if strategy == "multi" or strategy == "none":
        return config
    if strategy == "single":
        budget = config.epochs_per_resolution * len(config.ladder)
        return replace(config, resolutions=[config.target_resolution], epochs_per_resolution=budget)
    raise ConfigError(f"unknown pre-training strategy '{strategy}', expected one of {STRATEGIES}")


def run_ablation(config: TrainConfig, train: Dataset, val: Dataset, test: Dataset, tau: float = 0.5,
                 lesion_name: Optional[str] = None, strategies: Sequence[str] = STRATEGIES,
                 log_dir: Optional[Path] = None) -> List[AblationResult]:
    """
    Train one model per strategy on the same data and seed, then score test
    classification and the top-1 lesion prototype's localisation
    """
    config.validate()
    lesion = lesion_class(test, lesion_name)
    results = []
    for strategy in strategies:
        cfg = strategy_config(config, strategy)
        paths = [Path(log_dir) / f"train_log_{strategy}.jsonl"] if log_dir else []
        log = TrainingLog(paths)
        logger.info("Ablation strategy '%s'", strategy)
        start = None if strategy == "none" else pretrain(cfg, train, log)
        ckpt = finetune(cfg, train, val, start, log)
        model = ProtoModel.from_checkpoint(ckpt)

        y_true, y_pred, probs = predict(model, test)
        metrics = classification_metrics(y_true, y_pred, probs)
        prototype = auto_prototype(model, lesion)
        cases = cases_from_model(model, test, prototype, tau)
        report = evaluate_detection(cases, tau, baseline_seed=cfg.seed, prototype=prototype)
        results.append(AblationResult(strategy, list(cfg.ladder) if strategy != "none" else [],
                                      float(ckpt.metrics.get("val_BAcc", float("nan"))), metrics["BAcc"],
                                      metrics["F1_macro"], prototype, report.ap, report.baseline_ap))
    return results


def results_frame(results: Sequence[AblationResult]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in results])
