# core/detection.py
"""
Localisation protocol for prototype activation maps.

An activation map is binarised at tau * max, split into 8-connected regions,
and each region's tight box is scaled about its centre by every factor in a
sweep. A ground-truth box counts as found when any predicted box overlaps it
with positive area; a predicted box overlapping no ground truth is a false
positive. True negatives are not defined. Counts are summed over all images
before precision and recall are computed for a scale, and AP is the area
under the enveloped precision/recall points of the sweep.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image
from scipy import ndimage

from core.classifier import relevant_prototypes
from core.data import Dataset
from core.errors import ConfigError, ContractViolation, DataError, ShapeError
from core.model import ProtoModel
from core.prototype_head import ActivationMap, ProtoGrid, activation_map

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class Box:
    """Pixel box with exclusive maxima"""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ShapeError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return self.x_min, self.y_min, self.x_max, self.y_max

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    def intersection(self, other: "Box") -> int:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        return max(w, 0) * max(h, 0)


@dataclass(frozen=True)
class Region:
    box: Box
    area: int
    # (x, y) in pixels
    centroid: Tuple[float, float]


@dataclass(frozen=True)
class MatchCounts:
    tp: int
    fp: int
    fn: int
    matched_pred: int = 0


@dataclass(frozen=True)
class PRPoint:
    scale: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


def _raster(amap) -> np.ndarray:
    return np.asarray(amap.raster if isinstance(amap, ActivationMap) else amap, dtype=np.float64)


def regions_from_activation(amap, tau: float = 0.5) -> List[Region]:
    """Connected regions of the map at or above tau * max, largest first"""
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must lie in (0, 1], got {tau}")
    raster = _raster(amap)
    peak = float(raster.max()) if raster.size else 0.0
    if peak <= 0.0:
        return []
    mask = raster >= tau * peak
    labels, count = ndimage.label(mask, structure=EIGHT_CONNECTED)
    slices = ndimage.find_objects(labels)
    index = list(range(1, count + 1))
    areas = ndimage.sum_labels(mask, labels, index) if count else []
    centres = ndimage.center_of_mass(mask, labels, index) if count else []
    regions = []
    for sl, area, (cy, cx) in zip(slices, areas, centres):
        box = Box(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
        regions.append(Region(box, int(area), (float(cx), float(cy))))
    return sorted(regions, key=lambda r: (-r.area, r.box.y_min, r.box.x_min))


def _scaled_span(lo: int, hi: int, s: float, limit: int) -> Tuple[int, int]:
    size = max(1, math.floor(s * (hi - lo) + 0.5))
    centre = (lo + hi) / 2.0
    start = math.floor(centre - size / 2.0 + 0.5)
    return max(0, start), min(limit, start + size)


def boxes_at_scale(regions: Sequence[Region], s: float, bounds: Tuple[int, int]) -> List[Box]:
    """Each region's tight box scaled by s about its centre, clipped to bounds = (W, H)"""
    if s <= 0:
        raise ConfigError(f"scale must be positive, got {s}")
    width, height = bounds
    boxes = []
    for region in regions:
        x0, x1 = _scaled_span(region.box.x_min, region.box.x_max, s, width)
        y0, y1 = _scaled_span(region.box.y_min, region.box.y_max, s, height)
        if x0 < x1 and y0 < y1:
            boxes.append(Box(x0, y0, x1, y1))
    return boxes


def _overlaps(pred: Box, gt: Box, min_overlap: float) -> bool:
    inter = pred.intersection(gt)
    return inter > 0 and inter >= min_overlap * gt.area


def match_boxes(pred: Sequence[Box], gt: Sequence[Box], min_overlap: float = 0.0) -> MatchCounts:
    """
    Count found and missed ground truth plus stray predictions

    `min_overlap` optionally requires intersection / ground-truth area to reach
    that fraction on top of the positive-area rule.
    """
    hits = np.array([[_overlaps(p, g, min_overlap) for g in gt] for p in pred], dtype=bool).reshape(len(pred), len(gt))
    tp = int(hits.any(axis=0).sum()) if len(gt) else 0
    matched = int(hits.any(axis=1).sum()) if len(pred) else 0
    return MatchCounts(tp=tp, fp=len(pred) - matched, fn=len(gt) - tp, matched_pred=matched)


@dataclass
class DetectionCase:
    raster: np.ndarray
    gt_boxes: List[Box]
    tau: float = 0.5
    image_id: str = ""
    regions: Optional[List[Region]] = None

    def __post_init__(self):
        self.raster = _raster(self.raster)
        self.gt_boxes = [b if isinstance(b, Box) else Box(*b) for b in self.gt_boxes]
        if self.regions is None:
            self.regions = regions_from_activation(self.raster, self.tau)

    @property
    def bounds(self) -> Tuple[int, int]:
        return self.raster.shape[1], self.raster.shape[0]

    def counts(self, s: float, min_overlap: float = 0.0) -> MatchCounts:
        return match_boxes(boxes_at_scale(self.regions, s, self.bounds), self.gt_boxes, min_overlap)


def default_scales() -> List[float]:
    """0.2, 0.3, ..., 10.0"""
    return [round(i / 10.0, 1) for i in range(2, 101)]


def pr_point(scale: float, counts: Sequence[MatchCounts]) -> PRPoint:
    tp = sum(c.tp for c in counts)
    fp = sum(c.fp for c in counts)
    fn = sum(c.fn for c in counts)
    matched = sum(c.matched_pred for c in counts)
    precision = matched / (matched + fp) if matched + fp > 0 else 1.0
    recall = tp / (tp + fn) if tp + fn > 0 else 1.0
    return PRPoint(scale, precision, recall, tp, fp, fn)


def pr_sweep(cases: Sequence[DetectionCase], scales: Optional[Sequence[float]] = None,
             min_overlap: float = 0.0) -> List[PRPoint]:
    """Micro-averaged precision/recall per scale"""
    scales = default_scales() if scales is None else list(scales)
    if not scales:
        raise ContractViolation("pr_sweep needs at least one scale")
    return [pr_point(s, [case.counts(s, min_overlap) for case in cases]) for s in scales]


def average_precision(points: Sequence[PRPoint]) -> float:
    if not points:
        raise ContractViolation("average_precision needs at least one point")
    ordered = sorted(points, key=lambda p: (p.recall, p.precision))
    recall = np.array([p.recall for p in ordered], dtype=np.float64)
    precision = np.array([p.precision for p in ordered], dtype=np.float64)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    recall = np.concatenate([[0.0], recall])
    envelope = np.concatenate([[envelope[0]], envelope])
    return float(np.sum(np.diff(recall) * (envelope[1:] + envelope[:-1]) / 2.0))


# -----------------------------
# Random-centroid baseline
# -----------------------------
def randomize_regions(regions: Sequence[Region], bounds: Tuple[int, int], rng: np.random.Generator) -> List[Region]:
    """Same region sizes, centres redrawn uniformly over positions where the box fits"""
    width, height = bounds
    out = []
    for region in regions:
        w, h = region.box.width, region.box.height
        x0 = int(rng.integers(0, width - w + 1))
        y0 = int(rng.integers(0, height - h + 1))
        out.append(Region(Box(x0, y0, x0 + w, y0 + h), region.area, (x0 + w / 2.0, y0 + h / 2.0)))
    return out


def random_centroid_ap(cases: Sequence[DetectionCase], scales: Optional[Sequence[float]] = None,
                       seed: int = 0, repeats: int = 5, min_overlap: float = 0.0) -> float:
    """Mean AP of `repeats` baselines that keep each case's region count and sizes"""
    rng = np.random.default_rng([seed, 21])
    values = []
    for _ in range(repeats):
        shuffled = [DetectionCase(c.raster, c.gt_boxes, c.tau, c.image_id,
                                  randomize_regions(c.regions, c.bounds, rng)) for c in cases]
        values.append(average_precision(pr_sweep(shuffled, scales, min_overlap)))
    return float(np.mean(values))


# -----------------------------
# Reports and inputs
# -----------------------------
@dataclass
class DetectionReport:
    tau: float
    scales: List[float]
    points: List[PRPoint]
    ap: float
    prototype: Optional[int] = None
    baseline_ap: Optional[float] = None
    config: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "tau": self.tau,
            "scales": self.scales,
            "points": [vars(p) for p in self.points],
            "AP": self.ap,
            "AP_definition": "scale-sweep precision envelope, trapezoid from recall 0",
            "prototype": self.prototype,
            "baseline_AP": self.baseline_ap,
            "config": self.config,
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(p) for p in self.points])


def evaluate_detection(cases: Sequence[DetectionCase], tau: float, scales: Optional[Sequence[float]] = None,
                       baseline_seed: Optional[int] = None, min_overlap: float = 0.0,
                       prototype: Optional[int] = None, config: Optional[Dict] = None) -> DetectionReport:
    scales = default_scales() if scales is None else list(scales)
    points = pr_sweep(cases, scales, min_overlap)
    ap = average_precision(points)
    baseline = None
    if baseline_seed is not None:
        baseline = random_centroid_ap(cases, scales, baseline_seed, min_overlap=min_overlap)
    logger.info("Detection AP %.4f over %d cases (tau %.2f)%s", ap, len(cases), tau,
                "" if baseline is None else f", random-centroid AP {baseline:.4f}")
    return DetectionReport(tau, scales, points, ap, prototype, baseline, dict(config or {}))


def read_activation_png(path) -> np.ndarray:
    """16-bit grayscale PNG, value / 65535"""
    try:
        with Image.open(path) as img:
            return np.asarray(img, dtype=np.float64) / 65535.0
    except OSError as exc:
        raise DataError(f"cannot read activation map {path}: {exc}") from exc


def write_activation_png(raster: np.ndarray, path) -> Path:
    path = Path(path)
    values = np.clip(np.round(np.asarray(raster, dtype=np.float64) * 65535.0), 0, 65535).astype(np.uint16)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(values).save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write activation map {path}: {exc}") from exc
    return path


def lesion_class(dataset: Dataset, name: Optional[str] = None) -> int:
    """Class id of `name`, or the class carrying the most ground-truth boxes"""
    if name is not None:
        if name not in dataset.class_names:
            raise ConfigError(f"unknown lesion class '{name}', dataset has {dataset.class_names}")
        return dataset.class_names.index(name)
    counts = np.zeros(len(dataset.class_names), dtype=int)
    for sample in dataset:
        counts[sample.label] += len(sample.boxes)
    if counts.max() == 0:
        raise DataError("dataset has no ground-truth boxes to evaluate against")
    return int(np.argmax(counts))


def auto_prototype(model: ProtoModel, class_id: int) -> int:
    """Top-weighted prototype of the class"""
    ranked = relevant_prototypes(model.classifier, class_id, tau_w=0.0)
    if not ranked:
        raise DataError(f"class {model.class_names[class_id]} has no prototype with positive weight")
    return ranked[0][0]


def cases_from_model(model: ProtoModel, dataset: Dataset, prototype: int, tau: float = 0.5,
                     resolution: Optional[int] = None, lesion_only: bool = True) -> List[DetectionCase]:
    """Detection cases from one prototype's activation maps, upsampled to each image's size"""
    samples = [s for s in dataset if s.boxes or not lesion_only]
    if not samples:
        raise DataError("no images with ground-truth boxes in the evaluation set")
    batch = model.analyse_batch([s.image for s in samples], resolution)
    cases = []
    for sample, proto in zip(samples, batch.proto):
        height, width = sample.image.shape
        amap = activation_map(ProtoGrid(proto), prototype, (width, height))
        cases.append(DetectionCase(amap.raster, [Box(*b) for b in sample.boxes], tau, sample.path))
    return cases


def cases_from_maps(dataset: Dataset, maps_dir, tau: float = 0.5,
                    lesion_only: bool = True) -> List[DetectionCase]:
    """Detection cases from precomputed 16-bit activation PNGs stored under the images' relative paths"""
    maps_dir = Path(maps_dir)
    samples = [s for s in dataset if s.boxes or not lesion_only]
    if not samples:
        raise DataError("no images with ground-truth boxes in the evaluation set")
    cases = []
    for sample in samples:
        path = maps_dir / sample.path
        if not path.exists():
            raise DataError(f"activation map missing for {sample.path}: {path}")
        raster = read_activation_png(path)
        if raster.shape != sample.image.shape:
            raise ShapeError(f"activation map {path} is {raster.shape}, image is {sample.image.shape}")
        cases.append(DetectionCase(raster, [Box(*b) for b in sample.boxes], tau, sample.path))
    return cases
