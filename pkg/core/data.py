# core/data.py
"""
Synthetic lesion images, dataset manifests and the aligned two-view augmentation.

Dataset layout on disk:
    <root>/<split>/<index>_<class>.png      8-bit grayscale
    <root>/labels.jsonl                     {"path", "label"}
    <root>/boxes.jsonl                      {"path", "label", "boxes"}
Paths are relative to <root>; boxes are [x_min, y_min, x_max, y_max] with
exclusive maxima.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from core.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
LESION_KINDS = ("none", "bright_blob", "dark_ellipse")
SPLITS = ("train", "val", "test")

BoxTuple = Tuple[int, int, int, int]


@dataclass
class LesionRecipe:
    name: str
    kind: str = "none"
    amplitude: float = 0.4


def _default_classes() -> List[LesionRecipe]:
    return [LesionRecipe("normal", "none"), LesionRecipe("drusen", "bright_blob", 0.4)]


@dataclass
class SyntheticSpec:
    image_size: int = 64
    classes: List[LesionRecipe] = field(default_factory=_default_classes)
    lesions_per_image: Tuple[int, int] = (1, 3)
    lesion_radius: Tuple[int, int] = (3, 6)
    noise_sigma: float = 0.03
    counts: Dict[str, int] = field(default_factory=lambda: {"train": 200, "val": 50, "test": 50})
    seed: int = 0
    patch_size: int = 8
    workers: int = 1

    def __post_init__(self):
        self.classes = [c if isinstance(c, LesionRecipe) else LesionRecipe(**c) for c in self.classes]
        self.lesions_per_image = tuple(self.lesions_per_image)
        self.lesion_radius = tuple(self.lesion_radius)

    def validate(self) -> "SyntheticSpec":
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch size {self.patch_size}")
        if not self.classes:
            raise ConfigError("at least one class recipe is required")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ConfigError(f"class names must be unique, got {names}")
        for recipe in self.classes:
            if recipe.kind not in LESION_KINDS:
                raise ConfigError(f"unknown lesion kind '{recipe.kind}' for class '{recipe.name}'")
        for name in ("lesions_per_image", "lesion_radius"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ConfigError(f"{name} must be a non-empty positive range, got {(lo, hi)}")
        if 2 * self.lesion_radius[1] + 2 >= self.image_size:
            raise ConfigError(f"lesion radius {self.lesion_radius[1]} does not fit a {self.image_size}px image")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if not self.counts or any(n <= 0 for n in self.counts.values()):
            raise ConfigError(f"split counts must be positive, got {self.counts}")
        return self


@dataclass
class Sample:
    image: np.ndarray
    label: int
    boxes: List[BoxTuple] = field(default_factory=list)
    path: str = ""
    label_name: str = ""


# -----------------------------
# Synthetic generation
# -----------------------------
def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Layered horizontal texture, loosely like stacked retinal layers"""
    y = np.arange(size)[:, None].astype(np.float64)
    x = np.arange(size)[None, :].astype(np.float64)
    period = size / rng.uniform(3.0, 5.0)
    tilt = rng.uniform(-0.15, 0.15)
    phase = rng.uniform(0.0, 2 * np.pi)
    bands = 0.35 + 0.08 * np.sin(2 * np.pi * (y + tilt * x) / period + phase)
    return np.broadcast_to(bands, (size, size)).copy()


def _lesion(size: int, kind: str, cx: int, cy: int, r: int, amplitude: float) -> Tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "dark_ellipse":
        rx, ry = r, max(1, int(round(r * 0.6)))
        d2 = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
        mask = d2 <= 1.0
        return np.where(mask, -amplitude, 0.0), mask
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    mask = d2 <= r * r
    profile = amplitude * np.exp(-d2 / (2.0 * (r / 2.0) ** 2))
    return np.where(mask, profile, 0.0), mask


def _mask_box(mask: np.ndarray) -> BoxTuple:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _separated(box: BoxTuple, others: Sequence[BoxTuple], gap: int = 2) -> bool:
    for o in others:
        if box[0] < o[2] + gap and o[0] < box[2] + gap and box[1] < o[3] + gap and o[1] < box[3] + gap:
            return False
    return True


def synthesize_sample(spec: SyntheticSpec, recipe: LesionRecipe,
                      rng: np.random.Generator) -> Tuple[np.ndarray, List[BoxTuple], np.ndarray]:
    """
    Render one image

    Returns:
        (image in [0, 1], tight lesion boxes, boolean lesion mask)
    """
    size = spec.image_size
    image = _background(size, rng)
    lesion_mask = np.zeros((size, size), dtype=bool)
    boxes: List[BoxTuple] = []
    if recipe.kind != "none":
        wanted = int(rng.integers(spec.lesions_per_image[0], spec.lesions_per_image[1] + 1))
        for _ in range(wanted):
            for _attempt in range(100):
                r = int(rng.integers(spec.lesion_radius[0], spec.lesion_radius[1] + 1))
                cx = int(rng.integers(r + 1, size - r - 1))
                cy = int(rng.integers(r + 1, size - r - 1))
                delta, mask = _lesion(size, recipe.kind, cx, cy, r, recipe.amplitude)
                box = _mask_box(mask)
                if _separated(box, boxes):
                    image = image + delta
                    lesion_mask |= mask
                    boxes.append(box)
                    break
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), boxes, lesion_mask


def split_labels(count: int, num_classes: int) -> List[int]:
    """Class id per sample index; the remainder goes to the first classes"""
    base, extra = divmod(count, num_classes)
    labels: List[int] = []
    for k in range(num_classes):
        labels.extend([k] * (base + (1 if k < extra else 0)))
    return labels


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir) -> Path:
    """Write train/val/test PNGs plus labels.jsonl and boxes.jsonl; fully determined by spec.seed"""
    spec.validate()
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {root}: {exc}") from exc

    records: List[Dict] = []
    for split_index, (split, count) in enumerate(spec.counts.items()):
        (root / split).mkdir(parents=True, exist_ok=True)
        labels = split_labels(count, len(spec.classes))

        def render(index: int, split=split, split_index=split_index, labels=labels):
            recipe = spec.classes[labels[index]]
            rng = np.random.default_rng([spec.seed, split_index, index])
            image, boxes, _ = synthesize_sample(spec, recipe, rng)
            rel = f"{split}/{index:05d}_{recipe.name}.png"
            return rel, recipe.name, image, boxes

        with ThreadPoolExecutor(max_workers=max(1, spec.workers)) as pool:
            rendered = list(pool.map(render, range(count)))
        for rel, name, image, boxes in rendered:
            try:
                Image.fromarray(_to_uint8(image)).save(root / rel)
            except OSError as exc:
                raise DataError(f"cannot write {root / rel}: {exc}") from exc
            records.append({"path": rel, "label": name, "boxes": [list(b) for b in boxes]})
        logger.info("Generated %d %s images in %s", count, split, root / split)

    with open(root / "labels.jsonl", "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps({"path": rec["path"], "label": rec["label"]}) + "\n")
    with open(root / "boxes.jsonl", "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    return root


# -----------------------------
# Loading
# -----------------------------
@dataclass
class Dataset:
    root: Path
    samples: List[Sample]
    class_names: List[str]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, index: int) -> Sample:
        return self.samples[index]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def images(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        chosen = range(len(self.samples)) if indices is None else indices
        return np.stack([self.samples[i].image for i in chosen])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(self.root, [self.samples[i] for i in indices], self.class_names, self.skipped)


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            gray = img.convert("L")
            return np.asarray(gray, dtype=np.float32) / 255.0
    except FileNotFoundError as exc:
        raise DataError(f"image not found: {path}") from exc
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def _read_jsonl(path: Path, required: Sequence[str]) -> List[Dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            missing = [k for k in required if k not in rec]
            if missing:
                raise DataError(f"{path}:{lineno}: missing keys {missing}")
            records.append(rec)
    return records


def _count_foreign_files(folder: Path) -> int:
    if not folder.is_dir():
        return 0
    return sum(1 for p in folder.rglob("*") if p.is_file() and p.suffix.lower() not in IMAGE_EXTENSIONS)


def _validate_boxes(boxes, image: np.ndarray, where: str) -> List[BoxTuple]:
    h, w = image.shape
    out = []
    for box in boxes:
        if len(box) != 4:
            raise DataError(f"{where}: box {box} does not have four corners")
        x0, y0, x1, y1 = (int(v) for v in box)
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise DataError(f"{where}: box {box} does not fit the {w}x{h} image")
        out.append((x0, y0, x1, y1))
    return out


def _load_manifest(root: Path, split: Optional[str]) -> Dataset:
    boxes_path, labels_path = root / "boxes.jsonl", root / "labels.jsonl"
    if boxes_path.exists():
        records = _read_jsonl(boxes_path, ("path", "label", "boxes"))
        if labels_path.exists():
            label_records = _read_jsonl(labels_path, ("path", "label"))
            pairs = [(r["path"], r["label"]) for r in label_records]
            if pairs != [(r["path"], r["label"]) for r in records]:
                raise DataError(f"{labels_path} and {boxes_path} disagree on images or labels")
    else:
        records = [dict(r, boxes=[]) for r in _read_jsonl(labels_path, ("path", "label"))]

    class_names = sorted({str(r["label"]) for r in records})
    index = {name: i for i, name in enumerate(class_names)}
    samples = []
    for lineno, rec in enumerate(records, start=1):
        rel = str(rec["path"])
        if split is not None and not rel.startswith(f"{split}/"):
            continue
        image = read_image(root / rel)
        where = f"{boxes_path.name}:{lineno} ({rel})"
        boxes = _validate_boxes(rec["boxes"], image, where)
        name = str(rec["label"])
        samples.append(Sample(image, index[name], boxes, rel, name))

    skipped = _count_foreign_files(root / split) if split else sum(
        _count_foreign_files(root / s) for s in SPLITS)
    return Dataset(root, samples, class_names, skipped)


def _load_folder(root: Path, split: Optional[str]) -> Dataset:
    base = root / split if split else root
    if not base.is_dir():
        raise DataError(f"dataset folder not found: {base}")
    class_dirs = sorted(p for p in base.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"no manifests and no class folders under {base}")
    class_names = [p.name for p in class_dirs]
    samples, skipped = [], 0
    for k, folder in enumerate(class_dirs):
        for path in sorted(p for p in folder.rglob("*") if p.is_file()):
            if path.suffix.lower() not in IMAGE_EXTENSIONS:
                skipped += 1
                continue
            rel = path.relative_to(root).as_posix()
            samples.append(Sample(read_image(path), k, [], rel, folder.name))
    return Dataset(root, samples, class_names, skipped)


def load_dataset(directory, split: Optional[str] = None) -> Dataset:
    """
    Load a manifest dataset, or an image folder (<split>/<class>/<image>) when no
    manifest exists; files with unknown extensions are skipped and counted
    """
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    if (root / "boxes.jsonl").exists() or (root / "labels.jsonl").exists():
        dataset = _load_manifest(root, split)
    else:
        dataset = _load_folder(root, split)
    if dataset.skipped:
        logger.warning("Skipped %d files with unknown extensions under %s", dataset.skipped, root)
    if not dataset.samples:
        raise DataError(f"no images found in {root}" + (f" for split '{split}'" if split else ""))
    return dataset


# -----------------------------
# Augmentation
# -----------------------------
@dataclass
class AugmentConfig:
    brightness: float = 0.2
    contrast: Tuple[float, float] = (0.8, 1.25)
    noise_sigma: float = 0.02
    flip_prob: float = 0.5

    def __post_init__(self):
        self.contrast = tuple(self.contrast)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(brightness=0.0, contrast=(1.0, 1.0), noise_sigma=0.0, flip_prob=0.0)


def _photometric(image: np.ndarray, rng: np.random.Generator, config: AugmentConfig) -> np.ndarray:
    out = image.astype(np.float64)
    if config.contrast != (1.0, 1.0):
        lo, hi = config.contrast
        factor = np.exp(rng.uniform(np.log(lo), np.log(hi)))
        mean = out.mean()
        out = (out - mean) * factor + mean
    if config.brightness > 0:
        out = out + rng.uniform(-config.brightness, config.brightness)
    if config.noise_sigma > 0:
        sigma = rng.uniform(0.0, config.noise_sigma)
        out = out + rng.normal(0.0, sigma, out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _draw_flip(rng: np.random.Generator, config: AugmentConfig) -> bool:
    return bool(rng.random() < config.flip_prob)


def two_view_augment(image: np.ndarray, seed, config: Optional[AugmentConfig] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Two photometric views sharing one geometry, so pixel (i, j) matches across views"""
    config = config or AugmentConfig()
    rng = np.random.default_rng(seed)
    base = np.asarray(image, dtype=np.float32)
    if _draw_flip(rng, config):
        base = base[:, ::-1]
    return _photometric(base, rng, config), _photometric(base, rng, config)


def flip_boxes(boxes: Sequence[BoxTuple], width: int) -> List[BoxTuple]:
    return [(width - x1, y0, width - x0, y1) for x0, y0, x1, y1 in boxes]


def augment_boxes(boxes: Sequence[BoxTuple], width: int, seed,
                  config: Optional[AugmentConfig] = None) -> List[BoxTuple]:
    """Boxes as seen in the views two_view_augment produces for the same seed"""
    config = config or AugmentConfig()
    if _draw_flip(np.random.default_rng(seed), config):
        return flip_boxes(boxes, width)
    return list(boxes)


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape == (size, size):
        return np.array(image, dtype=np.float32, copy=True)
    pil = Image.fromarray(np.ascontiguousarray(image, dtype=np.float32))
    return np.asarray(pil.resize((size, size), Image.Resampling.BILINEAR), dtype=np.float32)


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled batches; a trailing single sample joins the previous batch"""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches
