"""Datasets: CIFAR-10 binary batches, a synthetic stand-in, splits, batching.

Images are float32 ``(N, 3, 32, 32)`` arrays holding raw pixel values in
``[0, 255]``; normalisation happens inside the models.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

RECORD_BYTES = 3073
SPLITS = ("train", "val", "test")
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)
CLASS_NAMES = ("airplane", "automobile", "bird", "cat", "deer",
               "dog", "frog", "horse", "ship", "truck")


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 255):
            raise ValueError("pixel values outside [0, 255]")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices, split=None):
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices], split or self.split, self.num_classes)

    def channel_stats(self):
        """Per-channel mean and std over all pixels (float64 accumulation)."""
        x = self.images.astype(np.float64)
        return x.mean(axis=(0, 2, 3)).astype(np.float32), x.std(axis=(0, 2, 3)).astype(np.float32)


def read_cifar_batch(path):
    """Parse one binary batch: records of 1 label byte + R, G, B planes."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise IngestionError(f"{path}: file not found") from None
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        whole = len(raw) // RECORD_BYTES
        raise IngestionError(
            f"{path}: truncated record at byte offset {whole * RECORD_BYTES} "
            f"(file has {len(raw)} bytes, records are {RECORD_BYTES})"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise IngestionError(f"{path}: label {labels[bad[0]]} at byte offset {bad[0] * RECORD_BYTES}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32)
    return images, labels


def write_cifar_batch(dataset, path):
    """Inverse of :func:`read_cifar_batch`; pixels are rounded to uint8."""
    pixels = np.clip(np.rint(dataset.images), 0, 255).astype(np.uint8).reshape(len(dataset), -1)
    rec = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def _find_batches(directory):
    for candidate in (directory, os.path.join(directory, "cifar-10-batches-bin")):
        if os.path.exists(os.path.join(candidate, TRAIN_FILES[0])):
            return candidate
    return directory


def load_cifar10(directory):
    """Load the standard 50,000 / 10,000 split from the binary distribution."""
    if not os.path.isdir(directory):
        raise IngestionError(f"{directory}: not a directory")
    root = _find_batches(directory)

    def load(names, split):
        parts = [read_cifar_batch(os.path.join(root, n)) for n in names]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        return Dataset(images, labels, split)

    return load(TRAIN_FILES, "train"), load(TEST_FILES, "test")


def train_val_split(train, val_fraction=0.1, seed=0):
    """Stratified, deterministic split into ``(train, val)``."""
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    n_val = int(round(len(train) * val_fraction))
    classes = np.arange(train.num_classes)
    members = [np.flatnonzero(train.labels == c) for c in classes]
    # largest-remainder allocation keeps every class within one of N*f/K
    exact = np.array([len(m) for m in members]) * (n_val / max(len(train), 1))
    take = np.floor(exact).astype(int)
    order = np.argsort(-(exact - take), kind="stable")
    take[order[: n_val - take.sum()]] += 1
    val_idx, train_idx = [], []
    for m, k in zip(members, take):
        perm = rng.permutation(m)
        val_idx.append(perm[:k])
        train_idx.append(perm[k:])
    val_idx = np.sort(np.concatenate(val_idx))
    train_idx = np.sort(np.concatenate(train_idx))
    return train.subset(train_idx, "train"), train.subset(val_idx, "val")


def class_patterns(num_classes, image_size, seed, channels=3):
    """Smooth per-class mean patterns in ``[-1, 1]``.

    Each class gets a few Gaussian blobs at seeded positions with seeded
    colours, plus a low-frequency grating, so classes differ in shape, colour
    and texture rather than in a single pixel.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size] / max(image_size - 1, 1)
    patterns = np.zeros((num_classes, channels, image_size, image_size))
    for k in range(num_classes):
        field = np.zeros((channels, image_size, image_size))
        for _ in range(3):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            width = rng.uniform(0.08, 0.2)
            colour = rng.uniform(-1, 1, size=channels)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
            field += colour[:, None, None] * bump
        angle, freq, phase = rng.uniform(0, np.pi), rng.uniform(1.0, 3.0), rng.uniform(0, 2 * np.pi)
        grating = np.cos(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        field += 0.5 * rng.uniform(-1, 1, size=channels)[:, None, None] * grating
        patterns[k] = field / np.abs(field).max()
    return patterns


def synthetic_blobs(num_classes=10, n_per_class=100, image_size=32, seed=0,
                    separation=60.0, noise_std=1.0, shift=0, split="train"):
    """Class-conditional Gaussian images around smooth class mean patterns.

    Class ``k`` has mean ``128 + separation/2 * pattern_k``, so two means
    differ by at most ``separation`` per pixel. Samples add i.i.d. Gaussian
    noise of ``noise_std`` and, when ``shift`` > 0, a random circular
    translation of up to ``shift`` pixels, then clip to ``[0, 255]``.
    Labels are exactly balanced and ordered by class. Splits drawn with the
    same seed share class patterns but have independent noise.
    """
    if min(num_classes, n_per_class, image_size) <= 0:
        raise ValueError("num_classes, n_per_class and image_size must be positive")
    patterns = class_patterns(num_classes, image_size, seed)
    means = 128.0 + 0.5 * separation * patterns
    # patterns depend on ``seed`` alone; noise also depends on the split, so
    # train/val/test drawn with one seed share classes but not samples
    rng = np.random.default_rng([seed, 1, SPLITS.index(split)])
    labels = np.repeat(np.arange(num_classes), n_per_class)
    images = means[labels] + rng.normal(0.0, noise_std, size=(len(labels),) + means.shape[1:])
    if shift:
        offsets = rng.integers(-shift, shift + 1, size=(len(labels), 2))
        for i, (dy, dx) in enumerate(offsets):
            images[i] = np.roll(images[i], (dy, dx), axis=(1, 2))
    images = np.clip(images, 0, 255).astype(np.float32)
    return Dataset(images, labels, split, num_classes)


def class_means(dataset):
    return np.stack([
        dataset.images[dataset.labels == c].mean(axis=0) for c in range(dataset.num_classes)
    ])


def nearest_mean_predict(means, images):
    flat = images.reshape(len(images), -1).astype(np.float64)
    centres = means.reshape(len(means), -1).astype(np.float64)
    d = (flat ** 2).sum(1)[:, None] - 2 * flat @ centres.T + (centres ** 2).sum(1)[None, :]
    return d.argmin(axis=1)


def epoch_permutation(n, shuffle_seed, epoch):
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batches(dataset, batch_size, shuffle_seed=None, epoch=0):
    """Yield ``(images, labels, indices)``; the final partial batch is kept.

    ``shuffle_seed=None`` iterates in stored order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else epoch_permutation(n, shuffle_seed, epoch)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx], idx
