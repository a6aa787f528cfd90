"""Dataset provisioning with fully seed-determined iteration.

MNIST is read from the standard idx files, CIFAR-10 from the binary batch
files; both may be gzip-compressed. The synthetic fixture generates oriented
gratings with random phase, a task a small conv net separates easily but a
linear classifier on raw pixels cannot (the class-conditional pixel means
vanish under random phase).

Batch order is a pure function of (seed, epoch index); normalization uses the
pinned per-channel constants below.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError

NORMALIZATION = {
    "mnist": (np.array([0.1307], dtype=np.float32),
              np.array([0.3081], dtype=np.float32)),
    "cifar10": (np.array([0.4914, 0.4822, 0.4465], dtype=np.float32),
                np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)),
    "synthetic": (np.array([0.0], dtype=np.float32),
                  np.array([1.0], dtype=np.float32)),
}

_SHUFFLE_SALT = 11
_STATS_SALT = 13
_SPLIT_SALT = {"train": 0, "test": 1}


@dataclass
class DatasetHandle:
    """In-memory dataset with deterministic batch iteration.

    ``images`` is [N, C, H, W]; uint8 pixels are normalized lazily per batch
    with the per-channel (mean, std) pair, float32 images are served as-is.
    """

    name: str
    split: str
    seed: int
    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    subset_fraction: float = 1.0
    mean: np.ndarray = field(default_factory=lambda: np.array([0.0], dtype=np.float32))
    std: np.ndarray = field(default_factory=lambda: np.array([1.0], dtype=np.float32))

    def __len__(self) -> int:
        return len(self.labels)

    def _materialize(self, idx: np.ndarray) -> np.ndarray:
        x = self.images[idx]
        if x.dtype == np.uint8:
            x = x.astype(np.float32) / 255.0
            x = (x - self.mean[None, :, None, None]) / self.std[None, :, None, None]
        return np.ascontiguousarray(x, dtype=np.float32)

    def batches(self, batch_size: int, epoch: int):
        """One epoch of (x, y) batches, shuffled by (seed, epoch)."""
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, _SHUFFLE_SALT, int(epoch)]))
        order = rng.permutation(len(self.labels))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield self._materialize(idx), self.labels[idx]

    def eval_batches(self, batch_size: int = 256):
        """Unshuffled batches for deterministic evaluation."""
        for start in range(0, len(self.labels), batch_size):
            idx = np.arange(start, min(start + batch_size, len(self.labels)))
            yield self._materialize(idx), self.labels[idx]

    def stats_batches(self, batch_size: int, count: int, salt: int = 0) -> list:
        """A fixed, seed-determined sample of batches for criterion statistics."""
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, _STATS_SALT, int(salt)]))
        out = []
        for _ in range(count):
            idx = rng.choice(len(self.labels), size=min(batch_size, len(self.labels)),
                             replace=False)
            out.append((self._materialize(idx), self.labels[idx]))
        return out

    def batches_per_epoch(self, batch_size: int) -> int:
        return (len(self.labels) + batch_size - 1) // batch_size


# ----------------------------------------------------------------- raw files

def _open_maybe_gzip(path: str):
    if os.path.exists(path):
        return open(path, "rb")
    if os.path.exists(path + ".gz"):
        return gzip.open(path + ".gz", "rb")
    raise DatasetError(f"missing dataset file: {path} (or {path}.gz)")


def _read_idx(path: str) -> np.ndarray:
    with _open_maybe_gzip(path) as f:
        magic = struct.unpack(">i", f.read(4))[0]
        ndim = magic & 0xFF
        if magic >> 8 != 0x08 or ndim not in (1, 3):
            raise DatasetError(f"{path}: not an unsigned-byte idx file (magic {magic:#x})")
        dims = struct.unpack(f">{ndim}i", f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype=np.uint8)
    if data.size != int(np.prod(dims)):
        raise DatasetError(f"{path}: payload size {data.size} != header {dims}")
    return data.reshape(dims)


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _load_mnist(root: str, split: str):
    img_name, lbl_name = _MNIST_FILES[split]
    images = _read_idx(os.path.join(root, "mnist", img_name))
    labels = _read_idx(os.path.join(root, "mnist", lbl_name))
    return images[:, None, :, :], labels.astype(np.int64)


def _load_cifar10(root: str, split: str):
    base = os.path.join(root, "cifar-10-batches-bin")
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" \
        else ["test_batch.bin"]
    record = 1 + 3072
    images, labels = [], []
    for name in names:
        with _open_maybe_gzip(os.path.join(base, name)) as f:
            raw = np.frombuffer(f.read(), dtype=np.uint8)
        if raw.size % record:
            raise DatasetError(f"{name}: size {raw.size} not a multiple of {record}")
        raw = raw.reshape(-1, record)
        labels.append(raw[:, 0].astype(np.int64))
        images.append(raw[:, 1:].reshape(-1, 3, 32, 32))
    return np.concatenate(images), np.concatenate(labels)


def _stratified_subset(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Per-class seeded sample of round(fraction * class count), at least 1."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        take = max(1, int(np.floor(fraction * len(idx) + 0.5)))
        keep.append(rng.permutation(idx)[:take])
    return np.sort(np.concatenate(keep))


def load_dataset(name: str, split: str = "train", root: str | None = None,
                 subset_fraction: float = 1.0, seed: int = 0,
                 **synthetic_kwargs) -> DatasetHandle:
    """Load a dataset by name into a DatasetHandle.

    ``root`` defaults to $ADMMPRUNE_DATA_ROOT or ./data. ``subset_fraction``
    takes a fixed class-stratified sample. Synthetic keyword arguments
    (n_per_class, difficulty) apply only to name="synthetic".
    """
    if split not in _SPLIT_SALT:
        raise DatasetError(f"unknown split {split!r}")
    if not (0.0 < subset_fraction <= 1.0):
        raise DatasetError(f"subset_fraction must be in (0, 1], got {subset_fraction}")
    if name == "synthetic":
        return synthetic_dataset(seed=seed, split=split, **synthetic_kwargs)
    root = root or os.environ.get("ADMMPRUNE_DATA_ROOT", "data")
    if name == "mnist":
        images, labels = _load_mnist(root, split)
    elif name == "cifar10":
        images, labels = _load_cifar10(root, split)
    else:
        raise DatasetError(f"unknown dataset {name!r}")
    if subset_fraction < 1.0:
        keep = _stratified_subset(labels, subset_fraction, seed)
        images, labels = images[keep], labels[keep]
    mean, std = NORMALIZATION[name]
    return DatasetHandle(name=name, split=split, seed=seed, images=images,
                         labels=labels, n_classes=10,
                         subset_fraction=subset_fraction, mean=mean, std=std)


def synthetic_dataset(seed: int, n_per_class: int = 300, difficulty: float = 0.8,
                      split: str = "train", size: int = 16) -> DatasetHandle:
    """Two-class oriented-grating images, fully determined by the seed.

    Class 0 carries a horizontal grating, class 1 a vertical one. Phase is
    uniform per sample and orientation is jittered by up to 25*difficulty
    degrees; additive Gaussian noise scales with difficulty.
    """
    if n_per_class < 1:
        raise DatasetError("n_per_class must be >= 1")
    rng = np.random.default_rng(
        np.random.SeedSequence([int(seed), 23, _SPLIT_SALT[split]]))
    n = 2 * n_per_class
    labels = np.arange(n) % 2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    k = 2.0 * np.pi / 4.0  # 4-pixel grating period
    images = np.empty((n, 1, size, size), dtype=np.float32)
    jitter = np.deg2rad(25.0) * difficulty
    for i in range(n):
        theta = labels[i] * (np.pi / 2.0) + rng.uniform(-jitter, jitter)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.7, 1.3)
        grating = np.cos(k * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        noise = rng.normal(0.0, 0.35 * difficulty, size=(size, size))
        images[i, 0] = amp * grating + noise
    mean, std = NORMALIZATION["synthetic"]
    return DatasetHandle(name="synthetic", split=split, seed=seed,
                         images=images, labels=labels.astype(np.int64),
                         n_classes=2, mean=mean, std=std)
