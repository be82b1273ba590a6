# core/explain.py
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from core.classifier import SparseClassifier
from core.data import Dataset
from core.errors import ConfigError, DataError, ShapeError
from core.model import ProtoModel
from core.prototype_head import ActivationMap, PresenceVector, activation_map

logger = logging.getLogger(__name__)

ELIGIBILITY_THRESHOLD = 1e-3
OVERLAY_RGB = (230, 57, 70)


@dataclass
class PrototypeHit:
    prototype: int
    presence: float
    # (row, col) on the feature grid
    location: Tuple[int, int]
    weights: Dict[str, float]


@dataclass
class ClassLine:
    name: str
    evidence: float
    score: float


@dataclass
class PrototypeLine:
    prototype: int
    presence: float
    location: Tuple[int, int]
    contributions: Dict[str, float]


@dataclass
class ScoringSheet:
    prediction: str
    reg_order: int
    classes: List[ClassLine] = field(default_factory=list)
    prototypes: List[PrototypeLine] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "prediction": self.prediction,
            "reg_order": self.reg_order,
            "classes": [{"name": c.name, "evidence": c.evidence, "score": c.score} for c in self.classes],
            "prototypes": [
                {
                    "id": p.prototype,
                    "presence": p.presence,
                    "location": [p.location[1], p.location[0]],
                    "contributions": p.contributions,
                }
                for p in self.prototypes
            ],
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot write scoring sheet {path}: {exc}") from exc
        return path


def eligible_prototypes(c: SparseClassifier, tau_w: float = ELIGIBILITY_THRESHOLD) -> np.ndarray:
    return np.flatnonzero(c.weights.max(axis=1) > tau_w)


def rank_prototypes(presence: PresenceVector, c: SparseClassifier, k: int,
                    tau_w: float = ELIGIBILITY_THRESHOLD) -> List[PrototypeHit]:
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    ids = eligible_prototypes(c, tau_w)
    # presence descending, ties by id
    ordered = sorted(ids, key=lambda d: (-float(presence.p[d]), int(d)))[:k]
    return [
        PrototypeHit(int(d), float(presence.p[d]), presence.argmax_locations[d],
                     {name: float(c.weights[d, j]) for j, name in enumerate(c.class_names)})
        for d in ordered
    ]


def topk_prototypes(model: ProtoModel, image: np.ndarray, k: int,
                    tau_w: float = ELIGIBILITY_THRESHOLD) -> List[PrototypeHit]:
    """Most present prototypes of `image` among those with weight above tau_w for some class"""
    return rank_prototypes(model.analyse(image).presence, model.classifier, k, tau_w)


def sheet_from_presence(presence: PresenceVector, c: SparseClassifier) -> ScoringSheet:
    """Exact decomposition e_k = sum_d p_d w_dk and score_k = log(e_k^n + 1)"""
    p = np.asarray(presence.p, dtype=np.float64)
    w = c.weights.astype(np.float64)
    contributions = p[:, None] * w
    evidence = contributions.sum(axis=0)
    scores = np.log(np.power(evidence, c.reg_order) + 1.0)
    classes = [ClassLine(name, float(evidence[j]), float(scores[j])) for j, name in enumerate(c.class_names)]
    lines = [
        PrototypeLine(d, float(p[d]), presence.argmax_locations[d],
                      {name: float(contributions[d, j]) for j, name in enumerate(c.class_names)})
        for d in range(len(p))
    ]
    return ScoringSheet(c.class_names[int(np.argmax(scores))], c.reg_order, classes, lines)


def scoring_sheet(model: ProtoModel, image: np.ndarray) -> ScoringSheet:
    return sheet_from_presence(model.analyse(image).presence, model.classifier)


def prototype_activation(model: ProtoModel, image: np.ndarray, d: int) -> ActivationMap:
    """Activation map of prototype d upsampled to the image's own pixel size"""
    height, width = np.asarray(image).shape[:2]
    return activation_map(model.analyse(image).proto, d, (width, height))


def render_heatmap(image: np.ndarray, amap: ActivationMap, path, color: Tuple[int, int, int] = OVERLAY_RGB,
                   max_alpha: float = 0.75) -> Path:
    """
    Write an RGB PNG: the grayscale image with a single-hue overlay whose
    opacity is proportional to the activation value

    Args:
        image: (H, W) grayscale image in [0, 1]
        amap: Activation map with an (H, W) raster
        path: Output PNG path
        color: Overlay colour
        max_alpha: Opacity at activation 1

    Returns:
        Path of the written file
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != amap.raster.shape:
        raise ShapeError(f"activation map {amap.raster.shape} does not match image {image.shape}")
    base = np.round(np.clip(image, 0.0, 1.0) * 255.0)
    rgb = np.repeat(base[:, :, None], 3, axis=2)
    alpha = (np.clip(amap.raster, 0.0, 1.0) * max_alpha)[:, :, None]
    blended = rgb * (1.0 - alpha) + np.asarray(color, dtype=np.float64)[None, None, :] * alpha
    out = np.clip(np.round(blended), 0, 255).astype(np.uint8)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(out).save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write heatmap {path}: {exc}") from exc
    return path


@dataclass
class GalleryEntry:
    path: str
    label: str
    presence: float
    location: Tuple[int, int]
    # (x_min, y_min, x_max, y_max) of the argmax patch in image pixels
    patch_box: Tuple[int, int, int, int]


def prototype_gallery(model: ProtoModel, dataset: Dataset, d: int, k: int = 5,
                      resolution: Optional[int] = None) -> List[GalleryEntry]:
    """The k images in which prototype d is most present, with where it fires"""
    if not 0 <= d < model.num_prototypes:
        raise IndexError(f"prototype {d} is out of range for {model.num_prototypes} prototypes")
    batch = model.analyse_batch([s.image for s in dataset], resolution)
    order = sorted(range(len(dataset)), key=lambda i: (-float(batch.presence[i, d]), i))[:k]
    entries = []
    for i in order:
        sample = dataset[i]
        grid = batch.proto[i][:, :, d]
        row, col = divmod(int(np.argmax(grid)), grid.shape[1])
        height, width = sample.image.shape
        sy, sx = height / grid.shape[0], width / grid.shape[1]
        box = (int(round(col * sx)), int(round(row * sy)), int(round((col + 1) * sx)), int(round((row + 1) * sy)))
        entries.append(GalleryEntry(sample.path, sample.label_name, float(batch.presence[i, d]), (row, col), box))
    return entries
