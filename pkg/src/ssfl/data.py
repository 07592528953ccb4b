"""Image datasets.

Representation training only ever receives :class:`UnlabeledImages`; labels stay on
:class:`LabeledImages` and are read by partitioning and evaluation code only.
"""
from __future__ import annotations

import os
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

SYNTHETIC_CLASSES = (
    "disk", "square", "triangle", "plus", "ring",
    "h_stripes", "v_stripes", "checker", "dots", "x_cross",
)


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class UnlabeledImages:
    images: torch.Tensor

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class LabeledImages:
    images: torch.Tensor   # (N, C, H, W), float in [0, 1]
    labels: torch.Tensor   # (N,), int64

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError("images and labels differ in length")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, indices: Sequence[int]) -> "LabeledImages":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return LabeledImages(self.images[idx], self.labels[idx])

    def unlabeled(self, indices: Optional[Sequence[int]] = None) -> UnlabeledImages:
        if indices is None:
            return UnlabeledImages(self.images)
        return UnlabeledImages(self.images[torch.as_tensor(list(indices), dtype=torch.long)])


def balanced_subset(labels, per_class: int, seed: int = 0) -> np.ndarray:
    """Sorted indices holding ``per_class`` random samples of every class."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    picks = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < per_class:
            raise DatasetError(f"class {c} has only {idx.size} samples, need {per_class}")
        picks.append(rng.choice(idx, per_class, replace=False))
    return np.sort(np.concatenate(picks))


def _soft(signed_dist: np.ndarray, width: float = 0.6) -> np.ndarray:
    # inside -> 1, outside -> 0, anti-aliased edge
    return 1.0 / (1.0 + np.exp(np.clip(signed_dist / width, -30, 30)))


def _shape_mask(cls: int, yy, xx, rng: np.random.Generator, n: int) -> np.ndarray:
    cy = rng.uniform(11, 21, (n, 1, 1))
    cx = rng.uniform(11, 21, (n, 1, 1))
    r = rng.uniform(7, 11, (n, 1, 1))
    dy, dx = yy - cy, xx - cx
    name = SYNTHETIC_CLASSES[cls]
    if name == "disk":
        return _soft(np.hypot(dy, dx) - r)
    if name == "ring":
        thick = rng.uniform(1.5, 2.5, (n, 1, 1))
        return _soft(np.abs(np.hypot(dy, dx) - r) - thick)
    if name in ("square", "plus", "x_cross"):
        base = {"square": 0.0, "plus": 0.0, "x_cross": np.pi / 4}[name]
        a = base + rng.uniform(-0.3, 0.3, (n, 1, 1))
        u = np.cos(a) * dx + np.sin(a) * dy
        v = -np.sin(a) * dx + np.cos(a) * dy
        if name == "square":
            return _soft(np.maximum(np.abs(u), np.abs(v)) - 0.8 * r)
        arm = rng.uniform(1.5, 2.5, (n, 1, 1))
        bar = np.minimum(np.maximum(np.abs(u) - arm, np.abs(v) - r),
                         np.maximum(np.abs(v) - arm, np.abs(u) - r))
        return _soft(bar)
    if name == "triangle":
        # upward triangle as intersection of three half-planes
        d = np.full(dy.shape, -np.inf)
        for ang in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3):
            nx, ny = np.cos(ang), -np.sin(ang)
            d = np.maximum(d, -(nx * dx + ny * dy) - 0.6 * r)
        return _soft(d)
    # texture classes fill a random rectangle covering most of the image
    h = rng.uniform(9, 14, (n, 1, 1))
    w = rng.uniform(9, 14, (n, 1, 1))
    region = _soft(np.maximum(np.abs(dy) - h, np.abs(dx) - w))
    period = rng.uniform(4, 7, (n, 1, 1))
    phase_y = rng.uniform(0, 2 * np.pi, (n, 1, 1))
    phase_x = rng.uniform(0, 2 * np.pi, (n, 1, 1))
    sy = np.sin(2 * np.pi * yy / period + phase_y)
    sx = np.sin(2 * np.pi * xx / period + phase_x)
    if name == "h_stripes":
        pattern = _soft(-sy / 0.3, 1.0)
    elif name == "v_stripes":
        pattern = _soft(-sx / 0.3, 1.0)
    elif name == "checker":
        pattern = _soft(-(sy * sx) / 0.2, 1.0)
    else:  # dots
        pattern = _soft(-(np.minimum(sy, sx) - 0.55) / 0.1, 1.0)
    return region * pattern


def make_synthetic_shapes(n: int, seed: int = 0, size: int = 32,
                          num_classes: int = 10) -> LabeledImages:
    """Procedural 10-class RGB image set (shapes and textures).

    The class is carried by geometry only: foreground/background colours, position,
    scale, rotation and noise are random and class-independent, so colour jitter and
    cropping do not give the class away. Labels are balanced and interleaved.
    """
    if not 1 <= num_classes <= len(SYNTHETIC_CLASSES):
        raise DatasetError(f"num_classes must be in [1, {len(SYNTHETIC_CLASSES)}]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = yy[None] * (32.0 / size)
    xx = xx[None] * (32.0 / size)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        m = idx.size
        if m == 0:
            continue
        mask = _shape_mask(c, yy, xx, rng, m)[:, None]
        bg = rng.uniform(0.0, 1.0, (m, 3, 1, 1))
        fg = rng.uniform(0.0, 1.0, (m, 3, 1, 1))
        # push foreground away from background so the shape stays visible
        gap = fg - bg
        norm = np.linalg.norm(gap, axis=1, keepdims=True) + 1e-8
        fg = np.clip(bg + gap / norm * np.maximum(norm, 0.45), 0, 1)
        tilt = rng.normal(0, 0.08, (m, 1, 1, 1)) * (yy[None] / 32 - 0.5)
        img = bg + tilt + mask * (fg - bg) + rng.normal(0, 0.04, (m, 3, size, size))
        images[idx] = np.clip(img, 0, 1)
    return LabeledImages(torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)))


def load_cifar10(root: str | os.PathLike, train: bool = True) -> LabeledImages:
    """Read the python-pickle release of CIFAR-10 from ``root`` (no download)."""
    root = Path(root)
    if (root / "cifar-10-batches-py").is_dir():
        root = root / "cifar-10-batches-py"
    names = [f"data_batch_{i}" for i in range(1, 6)] if train else ["test_batch"]
    xs, ys = [], []
    for name in names:
        path = root / name
        if not path.exists():
            raise DatasetError(f"CIFAR-10 batch not found: {path}")
        with open(path, "rb") as fh:
            batch = pickle.load(fh, encoding="latin1")
        xs.append(np.asarray(batch["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.append(np.asarray(batch["labels"], dtype=np.int64))
    images = torch.from_numpy(np.concatenate(xs)).float().div_(255.0)
    return LabeledImages(images, torch.from_numpy(np.concatenate(ys)))


def load_npz(path: str | os.PathLike) -> LabeledImages:
    """Arrays ``images`` (N, C, H, W) or (N, H, W, C) and ``labels`` (N,) from an .npz file."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    with np.load(path) as f:
        images, labels = f["images"], f["labels"]
    if images.ndim == 4 and images.shape[-1] in (1, 3) and images.shape[1] not in (1, 3):
        images = images.transpose(0, 3, 1, 2)
    images = torch.from_numpy(np.ascontiguousarray(images)).float()
    if images.max() > 1.0:
        images = images / 255.0
    return LabeledImages(images, torch.from_numpy(labels.astype(np.int64)))
