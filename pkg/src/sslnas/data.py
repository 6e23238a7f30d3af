"""Dataset ingestion: image folders and a deterministic synthetic generator.

The synthetic generator draws class-conditioned Gabor-like textures with a
colored shape overlay, so classes are separable by color/orientation/shape
while each sample keeps enough instance identity for contrastive training.
Images are quantized to uint8 at creation, like decoded files, which keeps
the byte content stable across platforms.
"""

from __future__ import annotations

import colorsys
import hashlib
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError
from .rng import seeded_rng

logger = logging.getLogger(__name__)

KIND_FOLDER = "folder"
KIND_SYNTHETIC = "synthetic"

WORKERS_ENV = "ENGINE_NUM_WORKERS"


@dataclass(frozen=True)
class DatasetDescriptor:
    """Where a dataset comes from and how to split it."""

    kind: str
    root: str | None = None
    classes: int = 10
    samples_per_class: int = 100
    image_size: int = 32
    seed: int = 0
    splits: tuple[tuple[str, float], ...] = (("train", 0.8), ("eval", 0.2))
    name: str | None = None

    def __post_init__(self):
        if self.kind not in (KIND_FOLDER, KIND_SYNTHETIC):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == KIND_FOLDER and not self.root:
            raise ConfigError("folder datasets need a root path")
        if self.kind == KIND_SYNTHETIC:
            if self.classes < 2:
                raise ConfigError("synthetic datasets need at least 2 classes")
            if self.samples_per_class < 1:
                raise ConfigError("samples_per_class must be positive")
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8")
        fractions = [f for _, f in self.splits]
        if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be positive and sum to 1, got {self.splits}")

    @property
    def resolved_name(self) -> str:
        if self.name:
            return self.name
        if self.kind == KIND_FOLDER:
            return Path(self.root).name
        return f"synthetic-c{self.classes}-s{self.seed}"

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetDescriptor":
        raw = dict(raw)
        if "splits" in raw and isinstance(raw["splits"], dict):
            raw["splits"] = tuple(raw["splits"].items())
        elif "splits" in raw:
            raw["splits"] = tuple((str(k), float(v)) for k, v in raw["splits"])
        return cls(**raw)


class Dataset:
    """Loaded samples with deterministic split assignment.

    Images are stored as uint8 (N, 3, S, S); ``image`` returns float64
    tensors in [0, 1].  Per-channel normalization statistics come from the
    train split.
    """

    def __init__(self, images: np.ndarray, labels: np.ndarray, class_names: list[str],
                 split_names: list[str], split_assignment: np.ndarray, name: str, skipped: int = 0):
        if images.ndim != 4 or images.shape[1] != 3:
            raise DataError(f"expected uint8 (N, 3, S, S) images, got shape {images.shape}")
        if len(images) != len(labels) or len(images) != len(split_assignment):
            raise DataError("images, labels, and split assignment must align")
        self.images = images
        self.labels = np.asarray(labels, dtype=np.int64)
        self.class_names = list(class_names)
        self.split_names = list(split_names)
        self.split_assignment = split_assignment
        self.name = name
        self.skipped = skipped
        self._split_cache = {
            s: np.flatnonzero(split_assignment == i) for i, s in enumerate(split_names)
        }
        train = self._split_cache.get("train")
        if train is None or len(train) == 0:
            raise DataError("dataset has no training samples")
        train_float = self.images[train].astype(np.float64) / 255.0
        mean = train_float.mean(axis=(0, 2, 3))
        std = np.maximum(train_float.std(axis=(0, 2, 3)), 1e-6)
        self.mean = torch.from_numpy(mean).reshape(3, 1, 1)
        self.std = torch.from_numpy(std).reshape(3, 1, 1)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def indices(self, split: str) -> np.ndarray:
        if split == "all":
            return np.arange(len(self.images))
        if split not in self._split_cache:
            raise DataError(f"unknown split {split!r}; have {sorted(self._split_cache)}")
        return self._split_cache[split]

    def image(self, index: int) -> torch.Tensor:
        return torch.from_numpy(self.images[index].astype(np.float64) / 255.0)

    def label(self, index: int) -> int:
        return int(self.labels[index])

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std


def _assign_splits(identities: list[str], labels: np.ndarray, splits, seed: int) -> list[int]:
    """Deterministic stratified split by seeded hash of sample identity.

    Within each class, samples are ordered by their keyed hash; the first
    round(f*n) go to the first split and so on, with the last split
    absorbing rounding remainders.
    """
    assignment = [0] * len(identities)
    for cls in np.unique(labels):
        members = [int(i) for i in np.flatnonzero(labels == cls)]
        keyed = sorted(
            members,
            key=lambda i: hashlib.sha256(f"{seed}:{identities[i]}".encode()).hexdigest(),
        )
        n = len(keyed)
        counts = []
        remaining = n
        for _, fraction in splits[:-1]:
            c = min(remaining, int(round(fraction * n)))
            counts.append(c)
            remaining -= c
        counts.append(remaining)
        cursor = 0
        for split_idx, count in enumerate(counts):
            for i in keyed[cursor : cursor + count]:
                assignment[i] = split_idx
            cursor += count
    return assignment


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


def _class_recipe(desc: DatasetDescriptor, cls: int) -> dict:
    hue = (cls * 0.6180339887498949) % 1.0
    return {
        "base": np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.9)),
        "accent": np.array(colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.9, 0.95)),
        "theta": math.pi * cls / desc.classes,
        "freq": 2.0 + (cls % 4),
        "shape": cls % 3,
    }


def _shape_mask(shape: int, size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    if shape == 0:  # circle
        return dx * dx + dy * dy <= radius * radius
    if shape == 1:  # square
        return (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    # upward triangle
    return (dy <= radius) & (dy >= -radius + 2.0 * np.abs(dx))


def _render_sample(recipe: dict, rng: np.random.Generator, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    phase = rng.uniform(0.0, 2.0 * math.pi)
    wave = np.sin(2.0 * math.pi * recipe["freq"] * (xs * math.cos(recipe["theta"]) + ys * math.sin(recipe["theta"])) + phase)
    texture = 0.55 + 0.4 * wave
    img = recipe["base"].reshape(3, 1, 1) * texture[None, :, :]

    cx = rng.uniform(0.25, 0.75) * size
    cy = rng.uniform(0.25, 0.75) * size
    radius = rng.uniform(0.15, 0.3) * size
    mask = _shape_mask(recipe["shape"], size, cx, cy, radius)
    shade = rng.uniform(0.75, 1.0)
    img = np.where(mask[None, :, :], recipe["accent"].reshape(3, 1, 1) * shade, img)

    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def generate_synthetic(desc: DatasetDescriptor) -> tuple[np.ndarray, np.ndarray, list[str]]:
    images, labels = [], []
    for cls in range(desc.classes):
        recipe = _class_recipe(desc, cls)
        for i in range(desc.samples_per_class):
            rng = seeded_rng(desc.seed, "synthetic", cls, i)
            images.append(_render_sample(recipe, rng, desc.image_size))
            labels.append(cls)
    class_names = [f"class{c:02d}" for c in range(desc.classes)]
    return np.stack(images), np.asarray(labels, dtype=np.int64), class_names


# ---------------------------------------------------------------------------
# folder loading
# ---------------------------------------------------------------------------

_IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


def _decode_image(path: Path, size: int) -> np.ndarray | None:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((size, size), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8).transpose(2, 0, 1)
    except Exception as e:
        logger.warning("skipping unreadable image %s: %s", path, e)
        return None


def _decode_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning("ignoring invalid %s=%r", WORKERS_ENV, raw)
        return 1


def load_folder(desc: DatasetDescriptor) -> tuple[np.ndarray, np.ndarray, list[str], list[str], int]:
    root = Path(desc.root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"dataset root {root} has no class directories")
    files: list[Path] = []
    labels: list[int] = []
    identities: list[str] = []
    for cls_idx, cls_dir in enumerate(class_dirs):
        members = sorted(p for p in cls_dir.iterdir() if p.suffix.lower() in _IMAGE_EXTENSIONS)
        if not members:
            raise DataError(f"class directory {cls_dir} contains no images")
        for p in members:
            files.append(p)
            labels.append(cls_idx)
            identities.append(f"{cls_dir.name}/{p.name}")

    workers = _decode_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            decoded = list(pool.map(lambda p: _decode_image(p, desc.image_size), files))
    else:
        decoded = [_decode_image(p, desc.image_size) for p in files]

    images, kept_labels, kept_ids = [], [], []
    skipped = 0
    for img, label, ident in zip(decoded, labels, identities):
        if img is None:
            skipped += 1
            continue
        images.append(img)
        kept_labels.append(label)
        kept_ids.append(ident)
    if not images:
        raise DataError(f"no decodable images under {root}")
    class_names = [d.name for d in class_dirs]
    return np.stack(images), np.asarray(kept_labels, dtype=np.int64), class_names, kept_ids, skipped


def load_dataset(desc: DatasetDescriptor) -> Dataset:
    """Materialize a descriptor: decode/generate samples and assign splits."""
    if desc.kind == KIND_SYNTHETIC:
        images, labels, class_names = generate_synthetic(desc)
        identities = [f"{labels[i]}:{i}" for i in range(len(labels))]
        skipped = 0
    else:
        images, labels, class_names, identities, skipped = load_folder(desc)
    split_names = [name for name, _ in desc.splits]
    assignment = np.asarray(_assign_splits(identities, labels, desc.splits, desc.seed), dtype=np.int64)
    return Dataset(
        images=images,
        labels=labels,
        class_names=class_names,
        split_names=split_names,
        split_assignment=assignment,
        name=desc.resolved_name,
        skipped=skipped,
    )
