"""Zero-shot episodic data: folds, episodes, dataset loading and synthesis.

On-disk layout shared by real (converted) and synthetic datasets::

    <root>/images/<id>.png   8-bit RGB
    <root>/labels/<id>.png   8-bit single channel, value = class id, 0 = background
    <root>/meta.json         {"n_classes": int, "ids": [str, ...]}

Episodes carry only the query image and its binary mask; no side
information about the target class is ever attached.

Sampling is a pure function of its seed. Parallel samplers should each use
their own stream, ``seed = base_seed + worker_id``.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image, ImageDraw

from .errors import ConfigError, ExhaustionError, LoadError, RangeError, ShapeError
from .fileio import atomic_write_bytes, atomic_write_text

SPLITS = ("train", "test")
SeedLike = Union[int, Sequence[int]]


@dataclass(frozen=True)
class FoldSpec:
    fold_index: int
    train_classes: FrozenSet[int]
    test_classes: FrozenSet[int]
    n_total_classes: int

    def __post_init__(self):
        train, test = frozenset(self.train_classes), frozenset(self.test_classes)
        object.__setattr__(self, "train_classes", train)
        object.__setattr__(self, "test_classes", test)
        if not train or not test:
            raise ConfigError("fold needs non-empty train and test class sets")
        if train & test:
            raise ConfigError(f"train/test classes overlap: {sorted(train & test)}")
        bad = [c for c in train | test if not 1 <= c <= self.n_total_classes]
        if bad:
            raise ConfigError(f"class ids outside 1..{self.n_total_classes}: {sorted(bad)}")

    def classes(self, split: str) -> FrozenSet[int]:
        if split == "train":
            return self.train_classes
        if split == "test":
            return self.test_classes
        raise ConfigError(f"unknown split {split!r}, expected one of {SPLITS}")


def build_fold_spec(fold_index: int, n_total_classes: int, classes_per_fold: int) -> FoldSpec:
    """Contiguous-block fold: the test classes of fold ``i`` are
    ``i*k+1 .. (i+1)*k`` and every other non-background class trains.

    This is the usual PASCAL-5i (k=5, 20 classes) / COCO-20i layout.
    """
    if classes_per_fold <= 0 or n_total_classes <= 0 or n_total_classes % classes_per_fold:
        raise ConfigError(
            f"{classes_per_fold} classes per fold does not partition {n_total_classes} classes"
        )
    n_folds = n_total_classes // classes_per_fold
    if n_folds < 2:
        raise ConfigError("a fold split needs at least two blocks of classes")
    if not 0 <= fold_index < n_folds:
        raise RangeError(f"fold_index {fold_index} outside [0, {n_folds})")
    lo = fold_index * classes_per_fold + 1
    test = frozenset(range(lo, lo + classes_per_fold))
    train = frozenset(range(1, n_total_classes + 1)) - test
    return FoldSpec(fold_index, train, test, n_total_classes)


def load_fold_override(path, n_total_classes: int) -> FoldSpec:
    """Read ``{"fold": int, "test_classes": [int, ...]}``; the rest train."""
    try:
        spec = json.loads(Path(path).read_text())
        fold, test = int(spec["fold"]), frozenset(int(c) for c in spec["test_classes"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad fold file {path}: {exc}") from exc
    train = frozenset(range(1, n_total_classes + 1)) - test
    return FoldSpec(fold, train, test, n_total_classes)


def binarize_mask(label_map, class_id: int):
    """1 where ``label_map == class_id``, else 0 (same array type as input)."""
    if class_id <= 0:
        raise RangeError("class_id must be > 0 (0 is background)")
    if isinstance(label_map, torch.Tensor):
        return (label_map == class_id).to(torch.uint8)
    return (np.asarray(label_map) == class_id).astype(np.uint8)


@dataclass
class Episode:
    query_image: torch.Tensor  # 3 x H x W, float32 in [0, 1]
    target_class_id: int
    gt_mask: torch.Tensor  # H x W, uint8 in {0, 1}
    split_tag: str
    image_id: str = ""

    def __post_init__(self):
        if self.query_image.ndim != 3 or self.query_image.shape[0] != 3:
            raise ShapeError(f"query image must be 3xHxW, got {tuple(self.query_image.shape)}")
        if tuple(self.gt_mask.shape) != tuple(self.query_image.shape[1:]):
            raise ShapeError("gt_mask shape differs from the image's spatial shape")
        if self.split_tag not in SPLITS:
            raise ConfigError(f"unknown split {self.split_tag!r}")
        if self.target_class_id <= 0:
            raise RangeError("target class id must be > 0")
        if int(self.gt_mask.sum()) == 0:
            raise ShapeError("episode mask has no foreground pixel")


@dataclass
class DatasetHandle:
    root_path: Path
    index: List[Tuple[str, FrozenSet[int]]]
    n_total_classes: int
    _cache: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(
        default_factory=dict, repr=False, compare=False
    )

    def __post_init__(self):
        self.root_path = Path(self.root_path)
        by_class: Dict[int, List[str]] = {}
        for image_id, classes in self.index:
            for c in classes:
                if c > self.n_total_classes:
                    raise ConfigError(
                        f"image {image_id} has class {c} > n_classes={self.n_total_classes}"
                    )
                by_class.setdefault(c, []).append(image_id)
        self._by_class = {c: sorted(ids) for c, ids in by_class.items()}

    def images_with(self, class_id: int) -> List[str]:
        return self._by_class.get(class_id, [])

    def present_classes(self) -> List[int]:
        return sorted(self._by_class)

    def load_pair(self, image_id: str) -> Tuple[np.ndarray, np.ndarray]:
        """(H x W x 3 uint8 image, H x W uint8 label map), cached."""
        if image_id not in self._cache:
            img = _read_png(self.root_path / "images" / f"{image_id}.png", "RGB")
            lab = _read_png(self.root_path / "labels" / f"{image_id}.png", "L")
            if img.shape[:2] != lab.shape:
                raise ShapeError(f"{image_id}: image {img.shape[:2]} vs label {lab.shape}")
            self._cache[image_id] = (img, lab)
        return self._cache[image_id]


def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc


def load_dataset(root) -> DatasetHandle:
    """Index a dataset directory by scanning every label map once."""
    root = Path(root)
    try:
        meta = json.loads((root / "meta.json").read_text())
        n_classes, ids = int(meta["n_classes"]), [str(i) for i in meta["ids"]]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise LoadError(f"cannot read dataset metadata under {root}: {exc}") from exc
    index = []
    for image_id in ids:
        if not (root / "images" / f"{image_id}.png").is_file():
            raise LoadError(f"missing image file for id {image_id}")
        labels = _read_png(root / "labels" / f"{image_id}.png", "L")
        present = frozenset(int(c) for c in np.unique(labels) if c != 0)
        index.append((image_id, present))
    return DatasetHandle(root, index, n_classes)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float().div_(255.0)


def sample_episode(
    dataset: DatasetHandle, fold: FoldSpec, split: str, rng_seed: SeedLike, max_tries: int = 100
) -> Episode:
    """Draw one episode: a class uniformly from the split's classes that occur
    in the dataset, then an image uniformly among those containing it."""
    classes = [c for c in sorted(fold.classes(split)) if dataset.images_with(c)]
    if not classes:
        raise ExhaustionError(f"no image contains any {split} class of fold {fold.fold_index}")
    rng = np.random.default_rng(rng_seed)
    for _ in range(max_tries):
        class_id = int(classes[rng.integers(len(classes))])
        candidates = dataset.images_with(class_id)
        image_id = candidates[rng.integers(len(candidates))]
        image, labels = dataset.load_pair(image_id)
        mask = binarize_mask(labels, class_id)
        if mask.any():
            return Episode(
                query_image=image_to_tensor(image),
                target_class_id=class_id,
                gt_mask=torch.from_numpy(mask),
                split_tag=split,
                image_id=image_id,
            )
    raise ExhaustionError(f"{max_tries} draws in a row produced an empty mask")


# --- synthetic shapes -------------------------------------------------------

SHAPE_FAMILIES = (
    "circle",
    "square",
    "triangle",
    "cross",
    "annulus",
    "diamond",
    "hexagon",
    "bar",
    "ring_square",
    "star",
)

# Per-domain rendering style. "B" shifts colors, texture scale and sensor noise
# so that a model trained on "A" sees the same classes under a domain shift.
_DOMAIN_STYLE = {
    "A": dict(bg_mean=(110, 110, 110), bg_amp=45, grain=10, noise=0.0, palette="warm"),
    "B": dict(bg_mean=(70, 95, 140), bg_amp=70, grain=4, noise=14.0, palette="cool"),
}


def _draw_shape(draw: ImageDraw.ImageDraw, family: str, cx, cy, r, rot, fill) -> None:
    box = [cx - r, cy - r, cx + r, cy + r]
    if family == "circle":
        draw.ellipse(box, fill=fill)
    elif family == "square":
        draw.regular_polygon((cx, cy, r), 4, rotation=rot % 90, fill=fill)
    elif family == "triangle":
        draw.regular_polygon((cx, cy, r), 3, rotation=rot, fill=fill)
    elif family == "cross":
        w = max(r * 0.4, 1.5)
        draw.rectangle([cx - r, cy - w, cx + r, cy + w], fill=fill)
        draw.rectangle([cx - w, cy - r, cx + w, cy + r], fill=fill)
    elif family == "annulus":
        draw.ellipse(box, fill=fill)
        inner = r * 0.5
        draw.ellipse([cx - inner, cy - inner, cx + inner, cy + inner], fill=0)
    elif family == "diamond":
        draw.polygon([(cx, cy - r), (cx + 0.6 * r, cy), (cx, cy + r), (cx - 0.6 * r, cy)], fill=fill)
    elif family == "hexagon":
        draw.regular_polygon((cx, cy, r), 6, rotation=rot, fill=fill)
    elif family == "bar":
        w = max(r * 0.3, 1.5)
        draw.rectangle([cx - r, cy - w, cx + r, cy + w], fill=fill)
    elif family == "ring_square":
        draw.rectangle(box, fill=fill)
        inner = r * 0.5
        draw.rectangle([cx - inner, cy - inner, cx + inner, cy + inner], fill=0)
    elif family == "star":
        pts = []
        for k in range(10):
            rad = r if k % 2 == 0 else r * 0.45
            ang = np.deg2rad(rot + 36 * k) - np.pi / 2
            pts.append((cx + rad * np.cos(ang), cy + rad * np.sin(ang)))
        draw.polygon(pts, fill=fill)
    else:
        raise ConfigError(f"unknown shape family {family!r}")


def _background(rng: np.random.Generator, size: int, style: dict) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(max(size // style["grain"], 2),) * 2 + (3,))
    smooth = np.asarray(
        Image.fromarray(((coarse.clip(-2.5, 2.5) + 2.5) * 51).astype(np.uint8)).resize(
            (size, size), Image.BICUBIC
        ),
        dtype=np.float64,
    )
    smooth = (smooth / 255.0 - 0.5) * 2 * style["bg_amp"]
    fine = rng.normal(0.0, 8.0, size=(size, size, 3))
    return np.asarray(style["bg_mean"], dtype=np.float64) + smooth + fine


def _color(rng: np.random.Generator, palette: str) -> Tuple[int, int, int]:
    hi, lo = rng.integers(170, 256), rng.integers(0, 90)
    mid = rng.integers(0, 256)
    if palette == "warm":
        return int(hi), int(mid), int(lo)
    return int(lo), int(mid), int(hi)


def _render(rng, size, class_id, family, style):
    """One image/label pair with 1-2 instances of a single shape family."""
    labels = Image.new("L", (size, size), 0)
    rgb = _background(rng, size, style)
    for _ in range(int(rng.integers(1, 3))):
        r = float(rng.uniform(0.2, 0.36) * size)
        cx, cy = (float(v) for v in rng.uniform(r * 0.6, size - r * 0.6, size=2))
        rot = float(rng.uniform(0, 360))
        inst = Image.new("L", (size, size), 0)
        _draw_shape(ImageDraw.Draw(inst), family, cx, cy, r, rot, 255)
        inside = np.asarray(inst) > 0
        color = np.asarray(_color(rng, style["palette"]), dtype=np.float64)
        rgb[inside] = color + rng.normal(0.0, 6.0, size=(int(inside.sum()), 3))
        labels_arr = np.asarray(labels).copy()
        labels_arr[inside] = class_id
        labels = Image.fromarray(labels_arr)
    if style["noise"]:
        rgb = rgb + rng.normal(0.0, style["noise"], size=rgb.shape)
    return rgb.clip(0, 255).astype(np.uint8), np.asarray(labels)


def _png_bytes(array: np.ndarray, mode: str) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def generate_synthetic_dataset(
    out_path, n_images: int, image_size: int, n_classes: int, seed: int, domain: str = "A"
) -> DatasetHandle:
    """Write a geometric-shapes dataset where each class is a shape family.

    Every image shows one or two instances of a single family on a textured
    noise background. Classes are assigned round-robin before shuffling, so
    each class appears in at least ``n_images // n_classes`` images.
    Output is byte-identical for identical arguments.
    """
    if n_classes < 4:
        raise ConfigError("synthetic dataset needs n_classes >= 4")
    if n_classes > len(SHAPE_FAMILIES):
        raise ConfigError(f"at most {len(SHAPE_FAMILIES)} shape families available")
    if image_size < 32:
        raise ConfigError("image_size must be >= 32")
    if n_images < 1:
        raise ConfigError("n_images must be >= 1")
    if domain not in _DOMAIN_STYLE:
        raise ConfigError(f"unknown domain style {domain!r}; choose from {sorted(_DOMAIN_STYLE)}")
    style = _DOMAIN_STYLE[domain]
    root = Path(out_path)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise LoadError(f"cannot create dataset under {root}: {exc}") from exc

    rng = np.random.default_rng(seed)
    assignment = np.arange(n_images) % n_classes + 1
    rng.shuffle(assignment)
    ids, index = [], []
    for i, class_id in enumerate(assignment):
        image_id = f"{i:05d}"
        image, labels = _render(rng, image_size, int(class_id), SHAPE_FAMILIES[class_id - 1], style)
        atomic_write_bytes(root / "images" / f"{image_id}.png", _png_bytes(image, "RGB"))
        atomic_write_bytes(root / "labels" / f"{image_id}.png", _png_bytes(labels, "L"))
        ids.append(image_id)
        index.append((image_id, frozenset(int(c) for c in np.unique(labels) if c)))
    meta = {"n_classes": n_classes, "ids": ids}
    atomic_write_text(root / "meta.json", json.dumps(meta, sort_keys=True, indent=1))
    return DatasetHandle(root, index, n_classes)
