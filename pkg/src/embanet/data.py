"""Dataset sources: synthetic separable blobs and CIFAR binary batches.

CIFAR-10 records are 1 label byte + 3072 pixel bytes (R, G, B planes of
32x32, row-major); CIFAR-100 records carry a coarse and a fine label byte
before the pixels and the fine label is used.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DataFormat",
    "LabelOutOfRange",
    "SyntheticBlobs",
    "CifarBinary",
    "Augment",
    "DatasetSource",
    "load_cifar_batch",
    "write_cifar_batch",
    "normalize",
    "denormalize",
    "augment_batch",
    "CIFAR10_MEAN",
    "CIFAR10_STD",
    "CIFAR100_MEAN",
    "CIFAR100_STD",
]

PIXELS = 3 * 32 * 32
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)


class DataFormat(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class LabelOutOfRange(DataFormat):
    pass


def normalize(pixels: np.ndarray, mean, std) -> np.ndarray:
    """uint8 (n, 3, h, w) -> float32 ``(x/255 - mean) / std`` per channel."""
    m = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return ((pixels.astype(np.float32) / np.float32(255.0)) - m) / s


def denormalize(x: np.ndarray, mean, std) -> np.ndarray:
    """Inverse of :func:`normalize`, rounded back to bytes."""
    m = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return np.clip(np.rint((x.astype(np.float64) * s + m) * 255.0), 0, 255).astype(np.uint8)


def _record_size(classes: int) -> int:
    if classes == 10:
        return 1 + PIXELS
    if classes == 100:
        return 2 + PIXELS
    raise ValueError(f"CIFAR has 10 or 100 classes, got {classes}")


def load_cifar_batch(path, classes: int = 10, *, raw: bool = False, mean=None, std=None):
    """Read one CIFAR binary batch file.

    Returns ``(images, labels)``; images are normalized float32 unless
    ``raw`` (then uint8).  Labels are int64.
    """
    rec = _record_size(classes)
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) == 0 or len(buf) % rec:
        whole = len(buf) // rec
        raise DataFormat(f"{os.fspath(path)}: {len(buf)} bytes is not a multiple of the "
                         f"{rec}-byte record size", whole * rec)
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, rec - PIXELS - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        i = int(bad[0])
        raise LabelOutOfRange(f"label {labels[i]} out of range for {classes} classes in record {i}",
                              i * rec + rec - PIXELS - 1)
    pixels = arr[:, rec - PIXELS:].reshape(-1, 3, 32, 32)
    if raw:
        return pixels.copy(), labels
    if mean is None:
        mean, std = (CIFAR10_MEAN, CIFAR10_STD) if classes == 10 else (CIFAR100_MEAN, CIFAR100_STD)
    return normalize(pixels, mean, std), labels


def write_cifar_batch(path, pixels: np.ndarray, labels, classes: int = 10, coarse=None) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1, PIXELS)
    labels = np.asarray(labels, dtype=np.uint8)
    cols = [labels[:, None]]
    if classes == 100:
        c = np.zeros_like(labels) if coarse is None else np.asarray(coarse, dtype=np.uint8)
        cols.insert(0, c[:, None])
    elif classes != 10:
        raise ValueError(f"CIFAR has 10 or 100 classes, got {classes}")
    with open(path, "wb") as fh:
        fh.write(np.concatenate(cols + [pixels], axis=1).tobytes())


@dataclass(frozen=True)
class SyntheticBlobs:
    """Gaussian blobs around per-class random template images.

    With the default ``separation`` and ``noise`` the classes are linearly
    separable with a wide margin.
    """

    classes: int = 4
    side: int = 16
    channels: int = 3
    samples: int = 512
    separation: float = 1.0
    noise: float = 0.5
    seed: int = 0

    def load(self, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        shape = (self.channels, self.side, self.side)
        templates = rng.standard_normal((self.classes, *shape)) * self.separation
        # the test split shares templates but draws fresh noise
        rng = np.random.default_rng([self.seed, 0 if split == "train" else 1])
        labels = np.arange(self.samples) % self.classes
        labels = rng.permutation(labels)
        x = templates[labels] + self.noise * rng.standard_normal((self.samples, *shape))
        return x.astype(np.float32), labels.astype(np.int64)


@dataclass(frozen=True)
class CifarBinary:
    paths: tuple[str, ...]
    classes: int = 10
    test_paths: tuple[str, ...] = ()

    def load(self, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
        paths = self.paths if split == "train" else self.test_paths
        if not paths:
            raise ValueError(f"no CIFAR files for split {split!r}")
        parts = [load_cifar_batch(p, self.classes) for p in paths]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


@dataclass(frozen=True)
class Augment:
    pad_crop: int = 0
    flip: bool = False

    @property
    def active(self) -> bool:
        return self.pad_crop > 0 or self.flip


@dataclass(frozen=True)
class DatasetSource:
    data: SyntheticBlobs | CifarBinary = SyntheticBlobs()
    augment: Augment = Augment()

    @property
    def classes(self) -> int:
        return self.data.classes

    def load(self, split: str = "train"):
        x, y = self.data.load(split)
        if y.size and (y.min() < 0 or y.max() >= self.classes):
            raise LabelOutOfRange(f"labels outside [0, {self.classes})", 0)
        return x, y


def augment_batch(x: np.ndarray, indices, aug: Augment, seed: int, epoch: int) -> np.ndarray:
    """Pad-and-random-crop, then horizontal flip, per sample.

    Each sample's randomness comes from ``(seed, epoch, index)`` alone, so
    batching and worker order never change the result.
    """
    if not aug.active:
        return x
    out = np.empty_like(x)
    p = aug.pad_crop
    h, w = x.shape[2:]
    for j, idx in enumerate(indices):
        rng = np.random.default_rng([seed, epoch, int(idx)])
        img = x[j]
        if p:
            padded = np.pad(img, ((0, 0), (p, p), (p, p)))
            dy, dx = rng.integers(0, 2 * p + 1, size=2)
            img = padded[:, dy : dy + h, dx : dx + w]
        if aug.flip and rng.random() < 0.5:
            img = img[:, :, ::-1]
        out[j] = img
    return out
