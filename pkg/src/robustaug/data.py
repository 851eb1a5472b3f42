"""Dataset ingestion (MNIST IDX), a synthetic motif dataset, splits, batching."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class WrongMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # [n, H, W, C] float64 in [0, 1]
    labels: np.ndarray  # [n] int64
    num_classes: int
    provenance: str = "synthetic"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [n, H, W, C], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels disagree in length")
        if len(self.labels) < 1:
            raise ValueError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> LabeledDataset:
        return LabeledDataset(self.images[index], self.labels[index], self.num_classes, self.provenance)


def _read_header(buf: bytes, magic: int, ndims: int, path) -> tuple[int, ...]:
    size = 4 * (1 + ndims)
    if len(buf) < size:
        raise TruncatedFileError(f"{path}: header truncated ({len(buf)} bytes)")
    found, *dims = struct.unpack(f">{1 + ndims}I", buf[:size])
    if found != magic:
        raise WrongMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    return tuple(dims)


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    n, rows, cols = _read_header(buf, IMAGES_MAGIC, 3, path)
    expected = 16 + n * rows * cols
    if len(buf) < expected:
        raise TruncatedFileError(f"{path}: payload has {len(buf) - 16} bytes, expected {n * rows * cols}")
    return np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (n,) = _read_header(buf, LABELS_MAGIC, 1, path)
    if len(buf) < 8 + n:
        raise TruncatedFileError(f"{path}: payload has {len(buf) - 8} bytes, expected {n}")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8)


def load_idx(images_path, labels_path, num_classes: int = 10, limit: int | None = None) -> LabeledDataset:
    """Parse a pair of big-endian IDX files; pixels are scaled into [0, 1]."""
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(raw) != len(labels):
        raise CountMismatchError(f"{len(raw)} images but {len(labels)} labels")
    if limit is not None:
        raw, labels = raw[:limit], labels[:limit]
    images = raw.astype(np.float64)[..., None] / 255.0
    return LabeledDataset(images, labels.astype(np.int64), num_classes, "mnist")


def write_idx(dataset: LabeledDataset, images_path, labels_path) -> None:
    """Write a single-channel dataset in the IDX layout (pixels rounded to bytes)."""
    n, h, w, c = dataset.images.shape
    if c != 1:
        raise ValueError("IDX export supports single-channel images only")
    pixels = np.clip(np.rint(dataset.images[..., 0] * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">4I", IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------- synthetic


def synth_mask(label: int, size: int) -> np.ndarray:
    """Canonical noise-free motif for class ``label`` on a ``size`` x ``size`` grid.

    Classes 0-3 are bars (horizontal, vertical, top-left square, bottom-right
    square placed off-centre); classes 4-7 are L/T/cross/frame shapes.  None of
    them is rotation- or negation-symmetric, so the transform families move them.
    """
    m = np.zeros((size, size))
    q = size // 4
    t = max(2, size // 8)
    lo, hi = q, size - q
    if label == 0:
        m[q:q + t, lo:hi] = 1.0                      # horizontal bar, upper half
    elif label == 1:
        m[lo:hi, size - q - t:size - q] = 1.0        # vertical bar, right side
    elif label == 2:
        m[q:q + 2 * t, q:q + 2 * t] = 1.0            # square, top-left
    elif label == 3:
        m[size - q - 2 * t:size - q, size - q - 2 * t:size - q] = 1.0  # square, bottom-right
    elif label == 4:
        m[lo:hi, q:q + t] = 1.0                      # L shape
        m[hi - t:hi, lo:hi] = 1.0
    elif label == 5:
        m[q:q + t, lo:hi] = 1.0                      # T shape
        m[lo:hi, size // 2 - t // 2:size // 2 - t // 2 + t] = 1.0
    elif label == 6:
        m[lo:hi, q:q + t] = 1.0                      # two vertical bars
        m[lo:hi, hi - t:hi] = 1.0
    elif label == 7:
        m[q:q + t, q:hi] = 1.0                       # diagonal staircase
        m[size // 2:size // 2 + t, size // 2:hi] = 1.0
        m[q:size // 2 + t, size // 2 - t:size // 2] = 1.0
    else:
        raise ValueError(f"no motif for class {label}")
    return m


def synth_generate(seed: int, n_per_class: int, k: int = 4, size: int = 16, noise: float = 0.05) -> LabeledDataset:
    """Deterministic motif dataset: bright class motif on a dark background
    (intensity 0.8) plus uniform noise of amplitude ``noise``."""
    if not 2 <= k <= 8:
        raise ValueError("k must be in [2, 8]")
    if size < 16:
        raise ValueError("size must be >= 16")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), n_per_class)
    base = np.stack([synth_mask(c, size) for c in range(k)]) * 0.8 + 0.1
    images = base[labels] + rng.uniform(-noise, noise, size=(len(labels), size, size))
    return LabeledDataset(np.clip(images, 0.0, 1.0)[..., None], labels, k, "synthetic")


# ---------------------------------------------------------------- batching


def make_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index slices of a permutation keyed by ``(seed, epoch)``; the last
    partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train_val_split(dataset: LabeledDataset, val_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded shuffle, then the last ``val_fraction`` of samples become validation."""
    if not 0 < val_fraction < 1:
        raise ValueError("validation fraction must lie in (0, 1)")
    perm = np.random.default_rng([seed, 0x5EED]).permutation(len(dataset))
    n_val = max(1, int(round(val_fraction * len(dataset))))
    if n_val >= len(dataset):
        raise ValueError("validation split leaves no training samples")
    return dataset.subset(perm[:-n_val]), dataset.subset(perm[-n_val:])
