# core/optim.py
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, Optional, Tuple

import numpy as np

from core.errors import ConfigError


def default_decay_set(names: Iterable[str]) -> FrozenSet[str]:
    """Projection weights only; norms, biases, the positional table and the classifier are never decayed"""
    return frozenset(n for n in names if n.endswith(".weight") and not n.startswith("classifier"))


def cosine_factor(step: int, total: int, warmup_fraction: float = 0.1) -> float:
    """Linear warm-up to 1, then cosine annealing to 0 over the remaining steps"""
    if total <= 0:
        return 1.0
    warmup = int(round(warmup_fraction * total))
    if step < warmup:
        return (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def cosine_schedule(step: int, total: int, warmup_fraction: float, base_lr: float) -> float:
    return base_lr * cosine_factor(step, total, warmup_fraction)


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float = 1.0) -> Tuple[Dict[str, np.ndarray], float]:
    """Rescale all gradients together when their joint L2 norm exceeds max_norm"""
    norm = global_norm(grads)
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-12)
    return {name: (g * scale).astype(g.dtype) for name, g in grads.items()}, norm


@dataclass
class AdamW:
    """
    Adam with decoupled weight decay

    Args:
        lr: Base learning rate for every parameter without an entry in `param_lr`
        betas: Moment decay rates
        eps: Denominator guard
        weight_decay: Decoupled decay coefficient, applied to names in `decay` only
        decay: Parameter names that receive weight decay
        param_lr: Per-parameter base learning rates
    """

    lr: float = 3e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    decay: FrozenSet[str] = frozenset()
    param_lr: Dict[str, float] = field(default_factory=dict)
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be non-negative")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             factor: float = 1.0, names: Optional[Iterable[str]] = None):
        """Update `params` in place; `factor` scales every learning rate (schedule multiplier)"""
        self.step_count += 1
        beta1, beta2 = self.betas
        t = self.step_count
        for name in (names if names is not None else grads):
            g = grads[name].astype(np.float64)
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m[...] = beta1 * m + (1 - beta1) * g
            v[...] = beta2 * v + (1 - beta2) * (g * g)
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            lr = self.param_lr.get(name, self.lr) * factor
            value = params[name].astype(np.float64)
            if name in self.decay and self.weight_decay > 0:
                value = value * (1.0 - lr * self.weight_decay)
            value = value - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            params[name] = value.astype(params[name].dtype)
