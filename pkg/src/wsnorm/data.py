"""Datasets: CIFAR-10 binary batches and a synthetic Gaussian-blob image task."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dataset",
    "CIFAR_RECORD_BYTES",
    "read_cifar10_batch",
    "load_cifar10",
    "synth_blobs",
    "standardize_channels",
    "augment",
    "iterate_batches",
]

CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    x: np.ndarray  # (N, C, H, W) float32
    y: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, n: int | None) -> Dataset:
        if n is None or n >= len(self):
            return self
        return Dataset(self.x[:n], self.y[:n])


def read_cifar10_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 binary batch: records of 1 label byte + 3072 CHW pixel bytes."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record")
    rec = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"{path}: label {labels.max()} out of range 0..9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(path, n_train: int | None = 5000, n_val: int | None = 1000) -> tuple[Dataset, Dataset]:
    """Load the binary CIFAR-10 release from ``path`` and standardize channels
    with training-split statistics. Returns (train, val); val is the test batch."""
    if not os.path.isdir(path):
        raise FileNotFoundError(f"CIFAR-10 directory not found: {path}")
    xs, ys = [], []
    for name in CIFAR_TRAIN_FILES:
        fp = os.path.join(path, name)
        if not os.path.exists(fp):
            if xs:
                break
            raise FileNotFoundError(f"missing CIFAR-10 batch file {fp}")
        x, y = read_cifar10_batch(fp)
        xs.append(x)
        ys.append(y)
        if n_train is not None and sum(len(v) for v in ys) >= n_train:
            break
    train = Dataset(np.concatenate(xs).astype(np.float32), np.concatenate(ys)).subset(n_train)
    test_fp = os.path.join(path, CIFAR_TEST_FILE)
    if not os.path.exists(test_fp):
        raise FileNotFoundError(f"missing CIFAR-10 test file {test_fp}")
    tx, ty = read_cifar10_batch(test_fp)
    val = Dataset(tx.astype(np.float32), ty).subset(n_val)
    train, val = standardize_channels(train, val)
    return train, val


def standardize_channels(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    x = train.x.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    std = x.std(axis=(0, 2, 3), keepdims=True)
    std[std == 0] = 1.0
    out = [Dataset(((x - mean) / std).astype(np.float32), train.y)]
    for d in others:
        out.append(Dataset(((d.x.astype(np.float64) - mean) / std).astype(np.float32), d.y))
    return tuple(out)


def _class_templates(rng, classes, channels, size, blobs):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    templates = np.zeros((classes, channels, size, size))
    for k in range(classes):
        for _ in range(blobs):
            cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
            width = rng.uniform(0.08, 0.2) * size
            color = rng.normal(0.0, 1.0, size=channels)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
            templates[k] += color[:, None, None] * bump
    return templates


def synth_blobs(seed: int, n: int, classes: int = 10, size: int = 16, channels: int = 3,
                noise: float = 0.8, shift: int = 2, blobs: int = 3) -> Dataset:
    """Class templates built from colored Gaussian bumps, randomly shifted,
    rescaled and corrupted by pixel noise. Deterministic in ``seed``; the
    templates depend only on (classes, size, channels, blobs) so every split
    shares them."""
    templates = _class_templates(np.random.default_rng(12345 + classes), classes, channels, size, blobs)
    rng = np.random.default_rng(seed)
    y = rng.integers(0, classes, size=n)
    x = np.empty((n, channels, size, size))
    dy = rng.integers(-shift, shift + 1, size=n)
    dx = rng.integers(-shift, shift + 1, size=n)
    amp = rng.uniform(0.6, 1.4, size=n)
    distract = rng.integers(0, classes, size=n)
    dist_amp = rng.uniform(0.0, 0.6, size=n)
    for i in range(n):
        img = amp[i] * templates[y[i]] + dist_amp[i] * templates[distract[i]][:, ::-1, ::-1]
        x[i] = np.roll(img, (dy[i], dx[i]), axis=(1, 2))
    x += noise * rng.normal(size=x.shape)
    return Dataset(x.astype(np.float32), y.astype(np.int64))


def augment(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip (p = 0.5) and zero-pad-and-crop shift by up to ``pad``."""
    n, c, h, w = x.shape
    flip = rng.random(n) < 0.5
    out = np.where(flip[:, None, None, None], x[..., ::-1], x)
    if pad:
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        oy = rng.integers(0, 2 * pad + 1, size=n)
        ox = rng.integers(0, 2 * pad + 1, size=n)
        out = np.stack([padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w] for i in range(n)])
    return np.ascontiguousarray(out)


def iterate_batches(n: int, batch: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n - batch + 1, batch):
        yield order[start:start + batch]
