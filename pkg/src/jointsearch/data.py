"""Datasets: a parametric synthetic benchmark and a reader for binary image batches.

Images are stored channel-first as float32 in [0, 1]. Per-channel mean and
standard deviation of the training split travel with the dataset and are
applied after augmentation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import artifacts

RECORD_BYTES = 1 + 3 * 32 * 32
PATTERNS = ("bars", "rings", "checkers", "gradients", "dots", "crosses", "waves", "blobs")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    @property
    def classes(self) -> int:
        return len(self.class_names)

    def search_split(self, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Disjoint halves of the training pool for weight training and search validation."""
        perm = np.random.default_rng([seed, 7]).permutation(len(self.train_x))
        half = len(perm) // 2
        return np.sort(perm[:half]), np.sort(perm[half:])

    def stats(self) -> dict:
        return {
            "classes": list(self.class_names),
            "train": int(len(self.train_x)),
            "test": int(len(self.test_x)),
            "shape": list(self.train_x.shape[1:]),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
        }


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    std = x.std(axis=(0, 2, 3), dtype=np.float64)
    return mean, np.where(std > 0, std, 1.0)


# ----------------------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 4
    side: int = 16
    train: int = 4000
    test: int = 1000
    noise: float = 0.12

    def validate(self) -> None:
        if not 2 <= self.classes <= len(PATTERNS):
            raise DatasetError(f"classes must be in [2, {len(PATTERNS)}], got {self.classes}")
        if self.side < 8:
            raise DatasetError(f"image side must be >= 8, got {self.side}")
        for split in ("train", "test"):
            n = getattr(self, split)
            if n < self.classes or n % self.classes:
                raise DatasetError(f"{split} size {n} must be a positive multiple of classes={self.classes}")
        if self.noise < 0:
            raise DatasetError("noise must be non-negative")


def _soft(s: np.ndarray, sharpness: float) -> np.ndarray:
    return 0.5 * (1 + np.tanh(sharpness * s))


def _pattern(kind: str, side: int, rng: np.random.Generator) -> np.ndarray:
    """A single-channel mask in [0, 1] with random pose and scale."""
    yy, xx = (np.mgrid[0:side, 0:side] + 0.5) / side - 0.5
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    u, v = c * xx + s * yy, -s * xx + c * yy
    cy, cx = rng.uniform(-0.15, 0.15, 2)
    r = np.hypot(xx - cx, yy - cy)
    freq = rng.uniform(2.0, 3.5)
    phase = rng.uniform(0, 2 * np.pi)
    sharp = rng.uniform(2.0, 6.0)
    if kind == "bars":
        return _soft(np.sin(2 * np.pi * freq * u + phase), sharp)
    if kind == "rings":
        return _soft(np.sin(2 * np.pi * freq * r * 1.5 + phase), sharp)
    if kind == "checkers":
        return _soft(np.sin(2 * np.pi * freq * u + phase) * np.sin(2 * np.pi * freq * v + phase), sharp)
    if kind == "gradients":
        return np.clip(u * rng.uniform(1.0, 1.6) + 0.5, 0, 1)
    if kind == "dots":
        return _soft(np.cos(2 * np.pi * freq * u) + np.cos(2 * np.pi * freq * v) - 1.0, sharp)
    if kind == "crosses":
        w = rng.uniform(0.06, 0.14)
        return np.maximum(_soft(w - np.abs(u - cx), 40), _soft(w - np.abs(v - cy), 40))
    if kind == "waves":
        return _soft(np.sin(2 * np.pi * freq * u + 0.8 * np.sin(2 * np.pi * 2 * v) + phase), sharp)
    if kind == "blobs":
        return _soft(rng.uniform(0.15, 0.3) - r, 20)
    raise DatasetError(f"unknown pattern {kind!r}")


def _render(kind: str, side: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    mask = _pattern(kind, side, rng)
    bg = rng.uniform(0.0, 0.45, 3)
    fg = bg + rng.uniform(0.3, 0.55, 3)  # the pattern is always brighter than its background
    img = bg[:, None, None] + (fg - bg)[:, None, None] * mask[None]
    img = img + rng.normal(0, noise, img.shape)
    return np.clip(img, 0, 1)


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0) -> Dataset:
    """Class-balanced pattern images; each class is one pattern family under random pose, scale and colour."""
    spec.validate()
    rng = np.random.default_rng([seed, 1234])
    names = PATTERNS[: spec.classes]

    def split(n: int) -> tuple[np.ndarray, np.ndarray]:
        labels = np.repeat(np.arange(spec.classes), n // spec.classes)
        labels = labels[rng.permutation(n)]
        images = np.stack([_render(names[y], spec.side, spec.noise, rng) for y in labels]).astype(np.float32)
        return images, labels.astype(np.int64)

    train_x, train_y = split(spec.train)
    test_x, test_y = split(spec.test)
    mean, std = channel_stats(train_x)
    return Dataset(train_x, train_y, test_x, test_y, names, mean, std)


# ----------------------------------------------------------------------------- binary batches


def read_batch_file(path: Path, n_labels: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Records of one label byte followed by 3072 planar RGB bytes (32x32)."""
    raw = np.fromfile(path, dtype=np.uint8)
    full, rest = divmod(raw.size, RECORD_BYTES)
    if rest:
        raise DatasetError(
            f"{path}: truncated record at byte offset {full * RECORD_BYTES} "
            f"({rest} trailing bytes, records are {RECORD_BYTES} bytes)"
        )
    records = raw.reshape(full, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= n_labels)
    if bad.size:
        i = int(bad[0])
        raise DatasetError(f"{path}: label {labels[i]} out of range at byte offset {i * RECORD_BYTES}")
    images = records[:, 1:].reshape(full, 3, 32, 32)
    return images, labels


def _select(images, labels, classes: Sequence[int], cap: int | None):
    keep = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        keep.append(idx if cap is None else idx[:cap])
    order = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[int(v)] for v in labels[order]], dtype=np.int64)
    return (images[order].astype(np.float32) / 255.0), y


def load_binary_batches(
    directory: Path | str,
    classes: Sequence[int] | None = None,
    cap: int | None = None,
    train_glob: str = "data_batch_*.bin",
    test_glob: str = "test_batch*.bin",
    n_labels: int = 10,
) -> Dataset:
    """Load train/test batch files, keep ``classes`` (relabelled in order) with at most ``cap`` images per class."""
    directory = Path(directory)
    train_files = sorted(directory.glob(train_glob))
    test_files = sorted(directory.glob(test_glob))
    if not train_files:
        raise DatasetError(f"no training batches matching {train_glob!r} in {directory}")
    classes = list(range(n_labels)) if classes is None else [int(c) for c in classes]
    if len(set(classes)) != len(classes) or any(not 0 <= c < n_labels for c in classes):
        raise DatasetError(f"invalid class subset {classes}")

    def load(files):
        parts = [read_batch_file(f, n_labels) for f in files]
        if not parts:
            return np.zeros((0, 3, 32, 32), np.uint8), np.zeros(0, np.int64)
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    train_x, train_y = _select(*load(train_files), classes, cap)
    test_x, test_y = _select(*load(test_files), classes, cap)
    mean, std = channel_stats(train_x)
    return Dataset(train_x, train_y, test_x, test_y, tuple(f"class_{c}" for c in classes), mean, std)


DATASET_SCHEMA = "jointsearch.dataset"
DATASET_VERSION = "1.0"


def save_dataset(path: Path | str, ds: Dataset) -> None:
    arrays = {"train_x": ds.train_x, "train_y": ds.train_y, "test_x": ds.test_x, "test_y": ds.test_y, "mean": ds.mean, "std": ds.std}
    artifacts.write_arrays(path, DATASET_SCHEMA, DATASET_VERSION, {"class_names": list(ds.class_names)}, arrays)


def load_dataset(path: Path | str) -> Dataset:
    meta, a = artifacts.read_arrays(path, DATASET_SCHEMA, DATASET_VERSION)
    return Dataset(a["train_x"], a["train_y"], a["test_x"], a["test_y"], tuple(meta["class_names"]), a["mean"], a["std"])
