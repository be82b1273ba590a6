# core/classifier.py
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from core.errors import ConfigError, ShapeError
from core.numerics import Graph, Var


@dataclass
class SparseClassifier:
    """Non-negative prototype-to-class weights (D x K) with no bias"""

    weights: np.ndarray
    reg_order: int = 2
    class_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32)
        if self.weights.ndim != 2:
            raise ShapeError(f"classifier weights must be D x K, got shape {self.weights.shape}")
        if self.reg_order < 2:
            raise ConfigError(f"reg_order must be at least 2, got {self.reg_order}")
        if not self.class_names:
            self.class_names = [str(k) for k in range(self.weights.shape[1])]
        if len(self.class_names) != self.weights.shape[1]:
            raise ConfigError(f"{len(self.class_names)} class names for {self.weights.shape[1]} weight columns")

    @property
    def num_prototypes(self) -> int:
        return self.weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def initialise(cls, num_prototypes: int, class_names: List[str], reg_order: int,
                   rng: np.random.Generator, mean: float = 0.1, std: float = 0.01) -> "SparseClassifier":
        w = rng.normal(mean, std, size=(num_prototypes, len(class_names)))
        return cls(np.maximum(w, 0.0), reg_order, list(class_names))


def evidence(p: np.ndarray, c: SparseClassifier) -> np.ndarray:
    return (np.asarray(p, dtype=np.float64) @ c.weights.astype(np.float64))


def score(p, c: SparseClassifier) -> np.ndarray:
    """log(e_k^n + 1) with e_k = sum_d p_d w_dk; accepts a PresenceVector or raw array"""
    values = getattr(p, "p", p)
    e = evidence(values, c)
    return np.log(np.power(e, c.reg_order) + 1.0)


def score_var(graph: Graph, presence: Var, weights: Var, reg_order: int) -> Var:
    e = presence @ weights
    return graph.log(graph.power(e, float(reg_order)) + 1.0, name="class_scores")


def project_nonnegative(c: SparseClassifier) -> SparseClassifier:
    return SparseClassifier(np.maximum(c.weights, 0.0), c.reg_order, list(c.class_names))


def shrink_nonnegative(weights: np.ndarray, amount: float) -> np.ndarray:
    """
    Proximal step of an L1 penalty restricted to the non-negative orthant

    Every weight moves `amount` toward zero and is clamped there, so weights
    without a steady gradient behind them end at exactly 0.
    """
    if amount < 0:
        raise ConfigError(f"shrink amount must be non-negative, got {amount}")
    w = np.asarray(weights)
    return np.maximum(w - amount, 0.0).astype(w.dtype)


def relevant_prototypes(c: SparseClassifier, k: int, tau_w: float = 1e-3) -> List[Tuple[int, float]]:
    """Prototypes with weight above tau_w for class k, heaviest first, ties by id"""
    if not 0 <= k < c.num_classes:
        raise IndexError(f"class {k} is out of range for {c.num_classes} classes")
    column = c.weights[:, k]
    hits = [(int(d), float(column[d])) for d in np.flatnonzero(column > tau_w)]
    return sorted(hits, key=lambda item: (-item[1], item[0]))
