"""Synthetic ten-class shapes dataset and its on-disk layout.

Every sample is rendered from its own generator seeded with ``(seed,
split, index)``, so a dataset is reproducible regardless of how the work is
split across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import load_tensor, save_tensor

CLASSES = (
    "circle",
    "square",
    "triangle",
    "cross",
    "ring",
    "bar-h",
    "bar-v",
    "l-shape",
    "dot-pair",
    "checker",
)
NUM_CLASSES = len(CLASSES)
NOISE_SIGMA = 0.05
MIN_SIZE = 16
_SPLITS = {"train": 0, "test": 1}
_SUPERSAMPLE = 3


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int = NUM_CLASSES
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be (N, C, H, W) with one label each")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)


def _shape_mask(label: int, dy: np.ndarray, dx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indicator of the figure in coordinates relative to its centre, radius 1."""
    r = np.hypot(dy, dx)
    if rng.random() < 0.5:
        dy = -dy
    if rng.random() < 0.5:
        dx = -dx
    if label == 0:
        return r <= 1
    if label == 1:
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.8
    if label == 2:
        t = (dy + 0.9) / 1.8
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= 0.95 * t)
    if label == 3:
        return ((np.abs(dx) <= 0.25) & (np.abs(dy) <= 1)) | ((np.abs(dy) <= 0.25) & (np.abs(dx) <= 1))
    if label == 4:
        return (r <= 1) & (r >= 0.55)
    if label == 5:
        return (np.abs(dy) <= 0.25) & (np.abs(dx) <= 1)
    if label == 6:
        return (np.abs(dx) <= 0.25) & (np.abs(dy) <= 1)
    if label == 7:
        return ((np.abs(dx) <= 0.9) & (dy >= 0.45) & (dy <= 0.9)) | ((dx >= -0.9) & (dx <= -0.45) & (np.abs(dy) <= 0.9))
    if label == 8:
        if rng.random() < 0.5:
            dy, dx = dx, dy
        return (np.hypot(dy, dx - 0.6) <= 0.35) | (np.hypot(dy, dx + 0.6) <= 0.35)
    if label == 9:
        return (np.maximum(np.abs(dy), np.abs(dx)) <= 0.85) & (dy * dx > 0)
    raise ValueError(label)


def render(label: int, size: int, rng: np.random.Generator, channels: int = 3) -> np.ndarray:
    """One (C, size, size) sample of class ``label``."""
    if size < MIN_SIZE:
        raise ValueError(f"image size must be at least {MIN_SIZE}, got {size}")
    radius = rng.uniform(0.22, 0.4) * size
    margin = radius + 1
    cy, cx = rng.uniform(margin - 0.5, size - margin - 0.5, size=2)
    s = _SUPERSAMPLE
    sub = (np.arange(size * s) + 0.5) / s - 0.5
    dy = (sub[:, None] - cy) / radius
    dx = (sub[None, :] - cx) / radius
    cover = _shape_mask(label, dy, dx, rng).reshape(size, s, size, s).mean(axis=(1, 3))
    bg = rng.uniform(0.0, 0.45, size=channels)
    fg = rng.uniform(0.55, 1.0, size=channels)
    if rng.random() < 0.5:
        bg, fg = fg, bg
    img = bg[:, None, None] + (fg - bg)[:, None, None] * cover[None]
    img += NOISE_SIGMA * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_shapes_dataset(n_per_class: int, size: int = 32, seed: int = 0, split: str = "train") -> Dataset:
    """``n_per_class`` samples of each class, labels cycling 0..9."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    size = int(size[0] if np.ndim(size) else size)
    if size < MIN_SIZE:
        raise ValueError(f"image size must be at least {MIN_SIZE}, got {size}")
    n = n_per_class * NUM_CLASSES
    labels = np.arange(n) % NUM_CLASSES
    images = np.empty((n, 3, size, size))
    tag = _SPLITS[split]
    for i in range(n):
        images[i] = render(int(labels[i]), size, np.random.default_rng([seed, tag, i]))
    return Dataset(images, labels, NUM_CLASSES, split)


def make_splits(per_class: int = 200, test_per_class: int = 50, size: int = 32, seed: int = 0) -> tuple[Dataset, Dataset]:
    return (
        generate_shapes_dataset(per_class, size, seed, "train"),
        generate_shapes_dataset(test_per_class, size, seed, "test"),
    )


def save_dataset(directory, train: Dataset, test: Dataset) -> None:
    """images.smda + labels.smda (train rows first) + meta.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "images.smda", np.concatenate([train.images, test.images]))
    save_tensor(d / "labels.smda", np.concatenate([train.labels, test.labels]).astype(np.float64))
    meta = {
        "num_classes": train.num_classes,
        "classes": list(CLASSES),
        "splits": {"train": [0, len(train)], "test": [len(train), len(train) + len(test)]},
        "shape": list(train.shape),
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_dataset(directory) -> tuple[Dataset, Dataset]:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    images = load_tensor(d / "images.smda")
    labels = load_tensor(d / "labels.smda").astype(np.int64)
    out = []
    for split in ("train", "test"):
        lo, hi = meta["splits"][split]
        out.append(Dataset(images[lo:hi], labels[lo:hi], meta["num_classes"], split))
    return out[0], out[1]
