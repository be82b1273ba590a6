# core/losses.py
"""
Training objectives over graph variables.

Every loss takes Vars of one Graph and returns a scalar Var, so the same code
serves training and the gradient checks. `evaluate` from core.numerics gives
plain float values for arrays.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from core.errors import ConfigError, ContractViolation, DataError, ShapeError
from core.numerics import Graph, Var

COMPONENTS = ("align", "tanh", "koleo", "class")


@dataclass
class LossWeights:
    lambda_align: float = 1.0
    lambda_tanh: float = 1.0
    lambda_koleo: float = 1.0
    lambda_class: float = 1.0
    eps: float = 1e-8
    warmup_fraction: float = 0.2

    def validate(self) -> "LossWeights":
        for name in ("lambda_align", "lambda_tanh", "lambda_koleo", "lambda_class"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError(f"warmup_fraction must lie in [0, 1], got {self.warmup_fraction}")
        return self

    def effective_align(self, progress: float) -> float:
        if self.warmup_fraction <= 0:
            return self.lambda_align
        return self.lambda_align * min(1.0, max(progress, 0.0) / self.warmup_fraction)


@dataclass
class LossBreakdown:
    total: Var
    components: Dict[str, Var] = field(default_factory=dict)
    weights: Dict[str, float] = field(default_factory=dict)

    def as_floats(self) -> Dict[str, float]:
        out = {name: float(var.value) for name, var in self.components.items()}
        out["total"] = float(self.total.value)
        return out


def alignment_loss(z1: Var, z2: Var, eps: float = 1e-8) -> Var:
    """-mean over locations of log(z1 . z2 + eps); inputs are softmaxed over the last axis"""
    if z1.shape != z2.shape:
        raise ShapeError(f"alignment views differ in shape: {z1.shape} vs {z2.shape}")
    graph = z1.graph
    dots = graph.sum(z1 * z2, axis=-1)
    return -graph.mean(graph.log(dots + eps), name="loss.align")


def tanh_loss(presence: Var, eps: float = 1e-8) -> Var:
    """presence is (B, D); penalises prototypes absent from the whole batch"""
    graph = presence.graph
    column = graph.sum(presence, axis=0)
    return -graph.mean(graph.log(graph.tanh(column) + eps), name="loss.tanh")


def koleo_loss(vectors: Var, eps: float = 1e-8) -> Var:
    """
    Nearest-neighbour spreading loss over (n, F) vectors

    The caller is responsible for normalising the vectors (see
    `flatten_normalize`); distances are plain Euclidean.
    """
    if vectors.ndim != 2 or vectors.shape[0] < 2:
        raise ContractViolation(f"koleo_loss needs at least 2 vectors, got shape {vectors.shape}")
    graph = vectors.graph
    n, f = vectors.shape
    diff = vectors.reshape(n, 1, f) - vectors.reshape(1, n, f)
    dist = graph.l2_norm(diff, axis=-1)
    # exclude self-distances from the minimum
    masked = dist + np.eye(n) * 1e9
    nearest = graph.minimum(masked, axis=1)
    return -graph.mean(graph.log(nearest + eps), name="loss.koleo")


def flatten_normalize(grid: Var, eps: float = 1e-12) -> Var:
    """(B, h', w', D) feature grids -> (B, h'*w'*D) unit vectors"""
    graph = grid.graph
    b = grid.shape[0]
    flat = grid.reshape(b, int(np.prod(grid.shape[1:])))
    norm = graph.l2_norm(flat, axis=-1, keepdims=True)
    return flat * graph.power(norm + eps, -1.0)


def classification_loss(scores: Var, labels: np.ndarray) -> Var:
    """Mean negative log-likelihood of the true class under softmax(scores)"""
    graph = scores.graph
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, k = scores.shape
    if labels.shape[0] != b:
        raise ShapeError(f"{labels.shape[0]} labels for {b} score rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label out of range for {k} classes: {labels.tolist()}")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    top = graph.max(scores, axis=1, keepdims=True)
    shifted = scores - top
    log_norm = graph.log(graph.sum(graph.exp(shifted), axis=1, keepdims=True))
    log_probs = shifted - log_norm
    return -graph.mean(graph.sum(log_probs * onehot, axis=1), name="loss.class")


def self_supervised_components(z1: Var, z2: Var, presence: Var, vectors: Var,
                               eps: float = 1e-8) -> Dict[str, Var]:
    return {
        "align": alignment_loss(z1, z2, eps),
        "tanh": tanh_loss(presence, eps),
        "koleo": koleo_loss(vectors, eps),
    }


def _combine(components: Dict[str, Var], weights: Dict[str, float]) -> Var:
    graph = next(iter(components.values())).graph
    total: Optional[Var] = None
    for name in COMPONENTS:
        if name not in components:
            continue
        term = components[name] * weights.get(name, 0.0)
        total = term if total is None else total + term
    return graph.const(0.0) if total is None else total


def pretrain_objective(z1: Var, z2: Var, presence: Var, vectors: Var, weights: LossWeights,
                       step: float) -> LossBreakdown:
    """Weighted alignment + tanh + KoLeo; `step` is pre-training progress in [0, 1]"""
    components = self_supervised_components(z1, z2, presence, vectors, weights.eps)
    lam = {
        "align": weights.effective_align(step),
        "tanh": weights.lambda_tanh,
        "koleo": weights.lambda_koleo,
    }
    return LossBreakdown(_combine(components, lam), components, lam)


def finetune_objective(components: Dict[str, Var], weights: LossWeights) -> LossBreakdown:
    """Weighted sum of all four components, without warm-up"""
    lam = {
        "align": weights.lambda_align,
        "tanh": weights.lambda_tanh,
        "koleo": weights.lambda_koleo,
        "class": weights.lambda_class,
    }
    return LossBreakdown(_combine(components, lam), dict(components), lam)
