# core/training.py
"""
Multi-resolution self-supervised pre-training and supervised fine-tuning.

Both loops follow the same step: build a Graph for the batch, read gradients
of the scalar objective, clip by global norm, take an AdamW step with the
cosine schedule. Fine-tuning additionally clamps the classifier weights at
zero after every step and keeps the checkpoint with the best validation BAcc.
"""
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from core.checkpoint import Checkpoint
from core.classifier import project_nonnegative, shrink_nonnegative
from core.data import AugmentConfig, Dataset, batch_indices, resize_image, two_view_augment
from core.encoder import EncoderConfig, bind_params, encoder_forward, init_encoder_params
from core.errors import ConfigError, DataError, NumericFailure
from core.losses import (LossWeights, classification_loss, finetune_objective, flatten_normalize,
                         pretrain_objective, self_supervised_components)
from core.metrics import classification_metrics
from core.model import CLASSIFIER_KEY, ProtoModel, build_model, forward_pass
from core.numerics import Graph
from core.optim import AdamW, clip_global_norm, cosine_factor, default_decay_set

logger = logging.getLogger(__name__)

# seed-stream tags so pre-training, fine-tuning and evaluation never share draws
_PRETRAIN, _FINETUNE, _EVAL = 11, 12, 13


@dataclass
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    reg_order: int = 2
    resolutions: Optional[List[int]] = None
    epochs_per_resolution: int = 5
    finetune_epochs: int = 30
    finetune_resolution: Optional[int] = None
    batch_size: int = 16
    learning_rate: float = 3e-4
    classifier_lr: float = 0.01
    # L1 strength on classifier weights; each step shrinks them by classifier_lr * schedule * classifier_l1
    classifier_l1: float = 0.1
    weight_decay: float = 1e-4
    lr_warmup_fraction: float = 0.1
    grad_clip: float = 1.0
    eval_fraction: float = 0.1
    seed: int = 0
    checkpoint_dir: Optional[str] = None
    progress: bool = True

    @property
    def ladder(self) -> List[int]:
        return list(self.resolutions or self.encoder.resolutions)

    @property
    def target_resolution(self) -> int:
        return self.finetune_resolution or max(self.ladder)

    def validate(self) -> "TrainConfig":
        self.encoder.validate()
        self.loss_weights.validate()
        for res in self.ladder + [self.target_resolution]:
            if res % self.encoder.patch_size:
                raise ConfigError(f"resolution {res} is not divisible by patch size {self.encoder.patch_size}")
            if res not in self.encoder.resolutions:
                raise ConfigError(f"resolution {res} is not among encoder resolutions {self.encoder.resolutions}")
        if self.epochs_per_resolution < 1:
            raise ConfigError(f"epochs_per_resolution must be at least 1, got {self.epochs_per_resolution}")
        if self.finetune_epochs < 0:
            raise ConfigError(f"finetune_epochs must be non-negative, got {self.finetune_epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.reg_order < 2:
            raise ConfigError(f"reg_order must be at least 2, got {self.reg_order}")
        if min(self.learning_rate, self.classifier_lr, self.classifier_l1, self.weight_decay) < 0:
            raise ConfigError("learning rates, classifier_l1 and weight decay must be non-negative")
        if not 0.0 < self.eval_fraction <= 1.0:
            raise ConfigError(f"eval_fraction must lie in (0, 1], got {self.eval_fraction}")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)


class TrainingLog:
    """JSON-lines epoch records, mirrored to every configured file"""

    FIELDS = ("epoch", "resolution", "L_A", "L_T", "L_KoLeo", "L_C", "total", "val_BAcc")

    def __init__(self, paths: Sequence = ()):
        self.paths = [Path(p) for p in paths if p]
        self.records: List[Dict] = []
        for path in self.paths:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("", encoding="utf-8")

    def write(self, record: Dict):
        row = {key: record.get(key) for key in self.FIELDS}
        row.update({k: v for k, v in record.items() if k not in row})
        self.records.append(row)
        line = json.dumps(row) + "\n"
        for path in self.paths:
            with open(path, "a", encoding="utf-8") as f:
                f.write(line)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records)


def _progress(iterable, config: TrainConfig, desc: str):
    return tqdm(iterable, desc=desc, leave=False, disable=not (config.progress and sys.stderr.isatty()))


def _stack_resized(dataset: Dataset, resolution: int) -> np.ndarray:
    return np.stack([resize_image(s.image, resolution) for s in dataset])


def _views(images: np.ndarray, indices: Sequence[int], seed: Sequence[int], augment: AugmentConfig):
    pairs = [two_view_augment(images[i], list(seed) + [int(i)], augment) for i in indices]
    return np.stack([a for a, _ in pairs]), np.stack([b for _, b in pairs])


def _named(components) -> Dict[str, float]:
    names = {"align": "L_A", "tanh": "L_T", "koleo": "L_KoLeo", "class": "L_C"}
    return {names[k]: float(v.value) for k, v in components.items()}


def _ssl_terms(graph: Graph, variables, view1: np.ndarray, view2: np.ndarray, config: TrainConfig,
               with_scores: bool):
    out1 = forward_pass(graph, variables, view1, config.encoder, config.reg_order, with_scores)
    out2 = forward_pass(graph, variables, view2, config.encoder, config.reg_order, with_scores)
    presence = graph.concatenate([out1.presence, out2.presence], axis=0)
    vectors = flatten_normalize(out1.features)
    return out1, out2, presence, vectors


def _guard(total: float, breakdown: Dict[str, float], where: str):
    if not np.isfinite(total):
        raise NumericFailure(f"non-finite loss at {where}: {breakdown}", node="loss.total", breakdown=breakdown)


def _apply_step(graph: Graph, total, params: Dict[str, np.ndarray], optimizer: AdamW,
                config: TrainConfig, step: int, total_steps: int) -> float:
    """Clipped AdamW step; returns the schedule factor it used"""
    grads = graph.gradients(total, wrt=list(params))
    grads, _ = clip_global_norm(grads, config.grad_clip)
    factor = cosine_factor(step, total_steps, config.lr_warmup_fraction)
    optimizer.step(params, grads, factor)
    return factor


def eval_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    """Fixed, seeded subset of training indices used to score pre-training epochs"""
    size = min(n, max(2, int(round(fraction * n))))
    rng = np.random.default_rng([seed, _EVAL])
    return np.sort(rng.choice(n, size=size, replace=False))


def pretrain_loss(params: Dict[str, np.ndarray], images: np.ndarray, config: TrainConfig,
                  seed: Sequence[int]) -> Dict[str, float]:
    """Pre-training objective with the target weights (no warm-up) on one fixed two-view batch"""
    graph = Graph()
    variables = bind_params(graph, params, trainable=False)
    view1, view2 = _views(images, range(len(images)), seed, config.augment)
    out1, out2, presence, vectors = _ssl_terms(graph, variables, view1, view2, config, with_scores=False)
    breakdown = pretrain_objective(out1.proto, out2.proto, presence, vectors, config.loss_weights, step=1.0)
    result = _named(breakdown.components)
    result["total"] = float(breakdown.total.value)
    return result


def pretrain(config: TrainConfig, train: Dataset, log: Optional[TrainingLog] = None,
             params: Optional[Dict[str, np.ndarray]] = None) -> Checkpoint:
    """
    Self-supervised pre-training over the resolution ladder

    Args:
        config: Training configuration
        train: Training images; labels are ignored
        log: Optional training log receiving one record per epoch
        params: Starting encoder weights; freshly initialised when omitted

    Returns:
        Encoder-only checkpoint of the epoch with the lowest evaluation loss
    """
    config.validate()
    if len(train) < 2:
        raise DataError("pre-training needs at least 2 images")
    log = log or TrainingLog()
    params = dict(params) if params is not None else init_encoder_params(config.encoder,
                                                                          np.random.default_rng([config.seed, 1]))
    optimizer = AdamW(lr=config.learning_rate, weight_decay=config.weight_decay,
                      decay=default_decay_set(params))
    order_rng = np.random.default_rng([config.seed, _PRETRAIN])
    eval_idx = eval_subset(len(train), config.eval_fraction, config.seed)
    batches_per_epoch = len(batch_indices(len(train), config.batch_size, np.random.default_rng(0)))
    total_steps = batches_per_epoch * config.epochs_per_resolution * len(config.ladder)

    best: Optional[Checkpoint] = None
    best_total = np.inf
    step = epoch = 0
    for resolution in config.ladder:
        images = _stack_resized(train, resolution)
        for _ in range(config.epochs_per_resolution):
            epoch += 1
            for batch in _progress(batch_indices(len(train), config.batch_size, order_rng), config,
                                   f"pretrain {resolution}px epoch {epoch}"):
                view1, view2 = _views(images, batch, [config.seed, _PRETRAIN, epoch], config.augment)
                graph = Graph()
                variables = bind_params(graph, params)
                out1, out2, presence, vectors = _ssl_terms(graph, variables, view1, view2, config, False)
                breakdown = pretrain_objective(out1.proto, out2.proto, presence, vectors,
                                               config.loss_weights, step / total_steps)
                _guard(float(breakdown.total.value), breakdown.as_floats(), f"pre-training step {step}")
                _apply_step(graph, breakdown.total, params, optimizer, config, step, total_steps)
                step += 1

            scored = pretrain_loss(params, images[eval_idx], config, [config.seed, _EVAL])
            _guard(scored["total"], scored, f"pre-training evaluation after epoch {epoch}")
            log.write(dict(scored, epoch=epoch, resolution=resolution, L_C=None, val_BAcc=None, stage="pretrain"))
            logger.info("pretrain epoch %d @%dpx: total %.4f (L_A %.4f, L_T %.4f, L_KoLeo %.4f)", epoch,
                        resolution, scored["total"], scored["L_A"], scored["L_T"], scored["L_KoLeo"])
            if scored["total"] < best_total:
                best_total = scored["total"]
                best = Checkpoint({k: v.copy() for k, v in params.items()},
                                  {"encoder": asdict(config.encoder), "stage": "pretrain",
                                   "reg_order": config.reg_order, "resolution": resolution,
                                   "train": _echo(config)},
                                  epoch, {"L_pre_train": best_total, "resolution": resolution})
    logger.info("Selected pre-training epoch %d (L_pre_train %.4f)", best.epoch, best_total)
    return best


def _echo(config: TrainConfig) -> Dict:
    echo = config.to_dict()
    echo.pop("checkpoint_dir", None)
    echo.pop("progress", None)
    return echo


def predict(model: ProtoModel, dataset: Dataset, resolution: Optional[int] = None):
    """(labels, predictions, class probabilities) over a dataset"""
    batch = model.analyse_batch([s.image for s in dataset], resolution)
    return dataset.labels, batch.predictions, batch.probabilities()


def validation_bacc(model: ProtoModel, dataset: Dataset, resolution: Optional[int] = None) -> float:
    y_true, y_pred, probs = predict(model, dataset, resolution)
    return classification_metrics(y_true, y_pred, probs)["BAcc"]


def _start_model(config: TrainConfig, class_names: List[str], start: Optional[Checkpoint]) -> ProtoModel:
    if start is None:
        return build_model(config.encoder, class_names, config.seed, config.reg_order, config.target_resolution)
    model = ProtoModel.from_checkpoint(start, class_names, config.reg_order, config.seed)
    if model.classifier.num_classes != len(class_names):
        raise ConfigError(f"checkpoint classifier has {model.classifier.num_classes} classes, "
                          f"dataset has {len(class_names)}")
    if model.config.embed_dim != config.encoder.embed_dim:
        raise ConfigError(f"checkpoint has D={model.config.embed_dim}, config asks for {config.encoder.embed_dim}")
    model.resolution = config.target_resolution
    return model


def finetune(config: TrainConfig, train: Dataset, val: Dataset, start: Optional[Checkpoint] = None,
             log: Optional[TrainingLog] = None) -> Checkpoint:
    """
    End-to-end fine-tuning with all four objectives at the target resolution

    Args:
        config: Training configuration
        train: Labelled training set
        val: Validation set used for model selection
        start: Pre-trained (or fully trained) checkpoint; random encoder when omitted
        log: Optional training log

    Returns:
        Checkpoint of the epoch with the best validation BAcc
    """
    config.validate()
    if val.class_names != train.class_names:
        raise ConfigError(f"validation classes {val.class_names} differ from training classes {train.class_names}")
    if config.finetune_epochs == 0 and start is not None:
        return start
    if len(train) < 2:
        raise DataError("fine-tuning needs at least 2 images")
    log = log or TrainingLog()
    model = _start_model(config, train.class_names, start)
    if config.finetune_epochs == 0:
        return model.to_checkpoint(0, {}, {"stage": "finetune", "train": _echo(config)})

    params = model.parameters()
    optimizer = AdamW(lr=config.learning_rate, weight_decay=config.weight_decay,
                      decay=default_decay_set(params), param_lr={CLASSIFIER_KEY: config.classifier_lr})
    order_rng = np.random.default_rng([config.seed, _FINETUNE])
    resolution = config.target_resolution
    images = _stack_resized(train, resolution)
    labels = train.labels
    batches_per_epoch = len(batch_indices(len(train), config.batch_size, np.random.default_rng(0)))
    total_steps = batches_per_epoch * config.finetune_epochs

    best: Optional[Checkpoint] = None
    best_bacc = -np.inf
    step = 0
    for epoch in range(1, config.finetune_epochs + 1):
        sums: Dict[str, float] = {}
        seen, guessed = [], []
        batches = batch_indices(len(train), config.batch_size, order_rng)
        for batch in _progress(batches, config, f"finetune epoch {epoch}"):
            view1, view2 = _views(images, batch, [config.seed, _FINETUNE, epoch], config.augment)
            graph = Graph()
            variables = bind_params(graph, params)
            out1, out2, presence, vectors = _ssl_terms(graph, variables, view1, view2, config, True)
            components = self_supervised_components(out1.proto, out2.proto, presence, vectors,
                                                    config.loss_weights.eps)
            scores = graph.concatenate([out1.scores, out2.scores], axis=0)
            components["class"] = classification_loss(scores, np.concatenate([labels[batch], labels[batch]]))
            breakdown = finetune_objective(components, config.loss_weights)
            floats = _named(breakdown.components)
            floats["total"] = float(breakdown.total.value)
            _guard(floats["total"], floats, f"fine-tuning step {step}")
            factor = _apply_step(graph, breakdown.total, params, optimizer, config, step, total_steps)
            params[CLASSIFIER_KEY] = shrink_nonnegative(params[CLASSIFIER_KEY],
                                                        config.classifier_lr * factor * config.classifier_l1)
            step += 1
            seen.append(labels[batch])
            guessed.append(np.argmax(out1.scores.value, axis=1))
            for key, value in floats.items():
                sums[key] = sums.get(key, 0.0) + value

        model.update(params)
        model.classifier = project_nonnegative(model.classifier)
        bacc = validation_bacc(model, val, resolution)
        record = {k: v / len(batches) for k, v in sums.items()}
        # scored on the first augmented view, before the step that followed each batch
        train_bacc = classification_metrics(np.concatenate(seen), np.concatenate(guessed))["BAcc"]
        weights = model.classifier.weights
        log.write(dict(record, epoch=epoch, resolution=resolution, val_BAcc=bacc, stage="finetune",
                       train_BAcc=train_bacc, min_weight=float(weights.min()),
                       zero_fraction=float(np.mean(weights < 1e-3))))
        logger.info("finetune epoch %d: total %.4f, L_C %.4f, train BAcc %.3f, val BAcc %.3f, %.0f%% zero weights",
                    epoch, record["total"], record["L_C"], train_bacc, bacc, 100 * np.mean(weights < 1e-3))
        # ties go to the later epoch
        if bacc >= best_bacc:
            best_bacc = bacc
            best = model.to_checkpoint(epoch, {"val_BAcc": bacc},
                                       {"stage": "finetune", "train": _echo(config)})
    logger.info("Selected fine-tuning epoch %d (val BAcc %.3f)", best.epoch, best_bacc)
    return best
