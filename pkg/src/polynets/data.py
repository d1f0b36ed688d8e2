"""Dataset loaders (CIFAR-10 binary, IDX), augmentation, subsampling, synthetic tasks."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    """A dataset file does not follow its binary layout."""


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    targets: Optional[np.ndarray] = None
    channel_mean: Optional[np.ndarray] = None
    channel_std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.class_count and self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        targets = None if self.targets is None else self.targets[index]
        return replace(self, images=self.images[index], labels=self.labels[index], targets=targets)


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------

def read_cifar10_file(path) -> Tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 binary batch into (uint8 N x 3 x 32 x 32, labels)."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise FormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}; "
                          f"truncated record starts at byte offset {whole * CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{path}: label byte {labels[bad]} > 9 at byte offset {bad * CIFAR_RECORD}")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def write_cifar10_file(path, images: np.ndarray, labels: Sequence[int]) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 3072)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    Path(path).write_bytes(np.concatenate([labels, images], axis=1).tobytes())


def channel_stats(images: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return images.mean(axis=(0, 2, 3)), images.std(axis=(0, 2, 3))


def standardize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (images - mean[None, :, None, None]) / np.maximum(std, 1e-12)[None, :, None, None]


def load_cifar10_binary(path, split: str = "train", stats: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                        dtype=np.float32) -> Dataset:
    """Load a CIFAR-10 split from the binary batches in directory ``path``.

    Pixels are scaled to [0, 1] and standardized per channel. The statistics
    come from ``stats`` when given (pass the training split's) and from the
    loaded split otherwise.
    """
    root = Path(path)
    names = CIFAR_TRAIN_FILES if split == "train" else (CIFAR_TEST_FILE,)
    missing = [n for n in names if not (root / n).is_file()]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 files missing under {root}: {', '.join(missing)}")
    parts = [read_cifar10_file(root / n) for n in names]
    images = np.concatenate([p[0] for p in parts]).astype(np.float64) / 255.0
    labels = np.concatenate([p[1] for p in parts])
    mean, std = stats if stats is not None else channel_stats(images)
    images = standardize(images, mean, std).astype(dtype)
    return Dataset(images, labels, 10, split, channel_mean=mean, channel_std=std)


def load_cifar10(path, dtype=np.float32) -> Tuple[Dataset, Dataset]:
    """Train and test splits, both standardized with the training statistics."""
    train = load_cifar10_binary(path, "train", dtype=dtype)
    test = load_cifar10_binary(path, "test", stats=(train.channel_mean, train.channel_std), dtype=dtype)
    return train, test


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: file too short for an IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{path}: {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx(images_path, labels_path, split: str = "train", class_count: Optional[int] = None,
             dtype=np.float32) -> Dataset:
    """Load an IDX image/label pair; images become N x 1 x H x W in [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
    if len(images) != len(labels):
        raise FormatError(f"{images_path} holds {len(images)} images but {labels_path} "
                          f"holds {len(labels)} labels")
    k = class_count if class_count is not None else int(labels.max()) + 1 if labels.size else 0
    return Dataset((images[:, None].astype(np.float64) / 255.0).astype(dtype), labels, k, split)


# ---------------------------------------------------------------------------
# augmentation and subsampling
# ---------------------------------------------------------------------------

def augment(batch: np.ndarray, pad: int, rng: np.random.Generator, flip: bool = True,
            return_params: bool = False):
    """Random crop after zero padding by ``pad``, then a horizontal flip with probability 1/2."""
    if pad < 0:
        raise ValueError("pad must be non-negative")
    n, _, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else batch
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    out = np.empty_like(batch)
    for i in range(n):
        crop = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    if return_params:
        return out, oy, ox, flips
    return out


def hflip(batch: np.ndarray) -> np.ndarray:
    return batch[..., ::-1].copy()


def subsample_per_class(dataset: Dataset, m: int, seed: int) -> Dataset:
    """Keep exactly ``m`` examples of every class, chosen and shuffled from ``seed``."""
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(dataset.class_count):
        pool = np.flatnonzero(dataset.labels == c)
        if len(pool) < m:
            raise ValueError(f"class {c} has {len(pool)} examples, fewer than the requested {m}")
        chosen.append(rng.choice(pool, size=m, replace=False))
    index = np.concatenate(chosen)
    rng.shuffle(index)
    return dataset.subset(index)


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

def poly_target(z: np.ndarray) -> np.ndarray:
    """Fixed regression target: the square of the first coordinate."""
    return z[:, :1] ** 2


def synth_dataset(kind: str, n: int, noise: float = 0.0, seed: int = 0, split: str = "train") -> Dataset:
    """Small 2-D tasks: ``xor`` quadrant clusters, ``moons`` half-circles, ``poly_regression``."""
    if n < 4:
        raise ValueError("synthetic datasets need n >= 4")
    rng = np.random.default_rng(seed)
    if kind == "xor":
        centers = np.array([[1, 1], [-1, -1], [1, -1], [-1, 1]], dtype=float)
        which = np.arange(n) % 4
        rng.shuffle(which)
        x = centers[which] + noise * rng.normal(size=(n, 2))
        labels = (centers[which].prod(axis=1) > 0).astype(np.int64)
        return Dataset(x, labels, 2, split)
    if kind == "moons":
        labels = np.arange(n) % 2
        rng.shuffle(labels)
        angle = rng.uniform(0, np.pi, size=n)
        upper = np.stack([np.cos(angle), np.sin(angle)], axis=1)
        lower = np.stack([1 - np.cos(angle), 0.5 - np.sin(angle)], axis=1)
        x = np.where(labels[:, None] == 0, upper, lower) + noise * rng.normal(size=(n, 2))
        return Dataset(x, labels, 2, split)
    if kind == "poly_regression":
        x = rng.uniform(-1, 1, size=(n, 2))
        y = poly_target(x) + noise * rng.normal(size=(n, 1))
        return Dataset(x, np.zeros(n, dtype=np.int64), 0, split, targets=y)
    raise ValueError(f"unknown synthetic dataset {kind!r}")


def data_root(flag: Optional[str] = None) -> Optional[str]:
    """Dataset root from an explicit flag, falling back to $POLYNETS_DATA_ROOT."""
    return flag or os.environ.get("POLYNETS_DATA_ROOT")
