"""Datasets: FER2013-style CSV loading, synthetic generators, seeded splits."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import RngStream
from .errors import DataError, ParameterError

EMOTIONS = ("anger", "disgust", "fear", "happiness", "sadness", "surprise", "neutral")
USAGE = {"Training": "train", "PublicTest": "val", "PrivateTest": "test"}


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_names: Optional[tuple] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_names)


@dataclass
class DatasetSplit:
    train: Dataset
    val: Dataset
    test: Dataset


def _empty(c, h, w):
    return Dataset(np.zeros((0, c, h, w), np.float32), np.zeros(0, np.int64))


def load_csv(path, image_hw=(48, 48), has_usage_column: Optional[bool] = None):
    """Read ``label,pixels[,usage]`` rows.

    ``pixels`` is H*W (grayscale) or 3*H*W (channel-major colour) integers in
    0..255. A header row is recognised by a non-numeric first field. With a
    usage column the rows are grouped into a ``DatasetSplit``; otherwise a
    single ``Dataset`` is returned. ``has_usage_column=None`` auto-detects.
    """
    h, w = image_hw
    text = Path(path).read_text(encoding="utf-8")
    rows = text.splitlines()
    start = 0
    if rows and not rows[0].split(",", 1)[0].strip().lstrip("-").isdigit():
        start = 1
    images, labels, usages = [], [], []
    channels = None
    for lineno, line in enumerate(rows[start:], start=start + 1):
        if not line.strip():
            continue
        fields = [f.strip() for f in line.split(",")]
        if has_usage_column is None:
            has_usage_column = len(fields) == 3
        if len(fields) != (3 if has_usage_column else 2):
            raise DataError(f"row {lineno}: expected {3 if has_usage_column else 2} fields, got {len(fields)}")
        try:
            label = int(fields[0])
        except ValueError:
            raise DataError(f"row {lineno}: label {fields[0]!r} is not an integer") from None
        if label < 0:
            raise DataError(f"row {lineno}: negative label {label}")
        try:
            pix = np.array([int(p) for p in fields[1].split()], dtype=np.int64)
        except ValueError:
            raise DataError(f"row {lineno}: pixel field contains a non-integer value") from None
        if pix.size == h * w:
            c = 1
        elif pix.size == 3 * h * w:
            c = 3
        else:
            raise DataError(f"row {lineno}: expected {h * w} pixels for a {h}x{w} image, got {pix.size}")
        if channels is None:
            channels = c
        elif c != channels:
            raise DataError(f"row {lineno}: channel count changes from {channels} to {c}")
        if pix.min() < 0 or pix.max() > 255:
            raise DataError(f"row {lineno}: pixel values must lie in 0..255")
        if has_usage_column:
            if fields[2] not in USAGE:
                raise DataError(f"row {lineno}: unknown usage tag {fields[2]!r}")
            usages.append(USAGE[fields[2]])
        images.append(pix.reshape(c, h, w))
        labels.append(label)

    channels = channels or 1
    if images:
        arr = np.stack(images).astype(np.float32) / np.float32(255)
    else:
        arr = np.zeros((0, channels, h, w), np.float32)
    data = Dataset(arr, np.array(labels, np.int64))
    if not has_usage_column:
        return data
    usages = np.array(usages)
    parts = {}
    for part in ("train", "val", "test"):
        idx = np.flatnonzero(usages == part)
        parts[part] = data.subset(idx) if idx.size else _empty(channels, h, w)
    return DatasetSplit(**parts)


def save_csv(data, path):
    """Inverse of ``load_csv``; a ``DatasetSplit`` gets a usage column."""
    tag = {v: k for k, v in USAGE.items()}
    parts = [(None, data)] if isinstance(data, Dataset) else [
        (tag[p], getattr(data, p)) for p in ("train", "val", "test")]
    lines = ["emotion,pixels" + (",Usage" if parts[0][0] else "")]
    for usage, ds in parts:
        pix = np.rint(ds.images.reshape(len(ds), -1).astype(np.float64) * 255).astype(np.int64)
        for label, row in zip(ds.labels, pix):
            line = f"{label},{' '.join(map(str, row))}"
            lines.append(line + (f",{usage}" if usage else ""))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def gen_synthetic(kind: str, n_per_class: int, num_classes: int, seed: int = 0,
                  image_hw=(48, 48), noise: Optional[float] = None, turns: float = 2.0) -> Dataset:
    """Desk-scale synthetic data.

    ``blobs`` and ``spiral`` give 2-D points stored as (2, 1, 1) images, one
    feature per channel. ``checkerboard-image`` gives (1, H, W) images whose
    class is a bright/dark pattern over the four quadrants. ``turns`` is how
    many revolutions each spiral arm makes (angle = 2*pi*turns*r).
    """
    if n_per_class < 1 or num_classes < 1:
        raise ParameterError("n_per_class and num_classes must be >= 1")
    rng = RngStream(seed)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    if kind == "blobs":
        sd = 0.3 if noise is None else noise
        ang = 2 * np.pi * labels / num_classes
        centers = 2.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        pts = centers + sd * rng.gen.standard_normal((len(labels), 2))
        images = pts.reshape(-1, 2, 1, 1)
    elif kind == "spiral":
        sd = 0.1 if noise is None else noise
        r = np.tile(np.arange(n_per_class) / n_per_class, num_classes)
        t = 2 * np.pi * turns * r + 2 * np.pi * labels / num_classes + sd * rng.gen.standard_normal(len(labels))
        images = np.stack([r * np.cos(t), r * np.sin(t)], axis=1).reshape(-1, 2, 1, 1)
    elif kind == "checkerboard-image":
        if num_classes > 15:
            raise ParameterError("checkerboard-image supports at most 15 classes")
        sd = 0.1 if noise is None else noise
        h, w = image_hw
        quad = np.zeros((4, h, w), bool)
        quad[0, : h // 2, : w // 2] = True
        quad[1, : h // 2, w // 2 :] = True
        quad[2, h // 2 :, : w // 2] = True
        quad[3, h // 2 :, w // 2 :] = True
        # class c lights the quadrants given by the bits of c + 1
        bits = ((np.arange(num_classes)[:, None] + 1) >> np.arange(4)) & 1
        templates = 0.2 + 0.6 * np.einsum("cq,qhw->chw", bits, quad)
        images = templates[labels] + sd * rng.gen.standard_normal((len(labels), h, w))
        images = np.clip(images, 0.0, 1.0)[:, None]
    else:
        raise ParameterError(f"unknown synthetic kind {kind!r}")
    return Dataset(images.astype(np.float32), labels)


def split(data: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Seeded shuffle then contiguous partition; train and val sizes are floored."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ParameterError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(data)
    n_train = math.floor(n * fractions[0] + 1e-9)
    n_val = min(math.floor(n * fractions[1] + 1e-9), n - n_train)
    perm = RngStream(seed).permutation(n)
    return DatasetSplit(
        data.subset(perm[:n_train]),
        data.subset(perm[n_train:n_train + n_val]),
        data.subset(perm[n_train + n_val:]),
    )
