"""MNIST IDX ingestion, stat-set splitting and batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, InputError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# accepted spellings of the four standard files, raw or gzipped
_STEMS = {
    "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, 1, 28, 28) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


@dataclass(frozen=True)
class SplitSpec:
    stat_set_size: int = 10_000
    seed: int = 0


def _read_bytes(path: Path) -> bytes:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise DataError(f"{path}: corrupt gzip stream") from exc
    return raw


def read_idx(path, expect_magic: int) -> np.ndarray:
    """Parse one IDX file of unsigned bytes into an array of its declared shape."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise DataError(f"{path}: wrong magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataError(f"{path}: dimensions {dims} need {count} bytes, file has {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.ndim != 3:
        raise DataError(f"{images_path}: expected 3 dimensions, got {images.ndim}")
    if len(images) != len(labels):
        raise DataError(f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels")
    x = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return Dataset(x, labels.astype(np.int64))


def find_mnist_files(mnist_dir) -> dict[str, Path]:
    """Locate the four standard files in ``mnist_dir`` (``-``/``.`` spelling, optional ``.gz``)."""
    root = Path(mnist_dir)
    found = {}
    for key, stems in _STEMS.items():
        for stem in stems:
            for suffix in ("", ".gz"):
                p = root / (stem + suffix)
                if p.is_file():
                    found[key] = p
                    break
            if key in found:
                break
        else:
            raise DataError(f"missing MNIST file {root / stems[0]} (or .gz)")
    return found


def load_mnist(mnist_dir) -> tuple[Dataset, Dataset]:
    """Return ``(train, test)`` from a directory holding the four IDX files."""
    f = find_mnist_files(mnist_dir)
    return (load_idx(f["train_images"], f["train_labels"]),
            load_idx(f["test_images"], f["test_labels"]))


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    if not 1 <= spec.stat_set_size < n:
        raise InputError(f"stat_set_size must be in [1, {n}), got {spec.stat_set_size}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    return np.sort(perm[spec.stat_set_size:]), np.sort(perm[:spec.stat_set_size])


def split_stat_set(train: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Carve a seeded random stat set out of ``train``; returns ``(remainder, stat_set)``."""
    rest, stat = split_indices(len(train), spec)
    return train.subset(rest), train.subset(stat)


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None):
    """Yield ``(images, labels)`` minibatches; the last one may be short."""
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    n = len(dataset)
    order = (np.random.default_rng(shuffle_seed).permutation(n)
             if shuffle_seed is not None else np.arange(n))
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
