"""Dataset handles: IDX (MNIST / Fashion-MNIST) files and synthetic 2-D sets."""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from .errors import ContractError, FormatError

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SYNTHETIC_KINDS = ("blobs", "moons")
SYNTHETIC_PAD_STDS = 4.0
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class DatasetHandle:
    """Images as N x C x H x W floats in [0, 1] with integer labels."""

    name: str
    split: str
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise FormatError(f"{self.name}: images must be N x C x H x W, got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise FormatError(f"{self.name}: {self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise FormatError(f"{self.name}: pixel values outside [0, 1]")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=max(self.num_classes, 1))

    def subset(self, limit: Optional[int]) -> "DatasetHandle":
        """The first ``limit`` samples (all of them when ``limit`` is None)."""
        if limit is None or limit >= len(self):
            return self
        return DatasetHandle(self.name, self.split, self.images[:limit], self.labels[:limit])

    def batches(self, batch_size: int, order: Optional[np.ndarray] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        if batch_size < 1:
            raise ContractError(f"batch size must be >= 1, got {batch_size}")
        index = np.arange(len(self)) if order is None else order
        for start in range(0, len(index), batch_size):
            chunk = index[start:start + batch_size]
            yield self.images[chunk], self.labels[chunk]

    def save_npz(self, path: Path) -> Path:
        path = Path(path)
        np.savez_compressed(path, images=self.images, labels=self.labels)
        return path


def _open(path: Path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as handle:
            return handle.read()
    except (OSError, EOFError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise FormatError(f"{path}: cannot read ({exc})") from exc


def read_idx(path: Path, expected_magic: int) -> np.ndarray:
    """Parse one IDX file of unsigned bytes into an array of its declared shape."""
    payload = _open(path)
    if len(payload) < 4:
        raise FormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", payload[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(payload) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", payload[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(payload) - header != count:
        raise FormatError(f"{path}: expected {count} data bytes for dims {dims}, found {len(payload) - header}")
    return np.frombuffer(payload, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path: Path, labels_path: Path, name: str = "mnist", split: str = "train") -> DatasetHandle:
    """Load an IDX image/label pair, scaling pixels to [0, 1]."""
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    scaled = images.astype(np.float64)[:, None, :, :] / 255.0
    logger.info(f"Loaded {images.shape[0]} {name}/{split} images of size {images.shape[1]}x{images.shape[2]}")
    return DatasetHandle(name, split, scaled, labels.astype(np.int64))


def _find(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{stem} not found in {directory}")


def load_mnist_dir(directory: Path, split: str, name: str = "mnist") -> DatasetHandle:
    """Load the standard MNIST file names (plain or gzipped) from a directory."""
    if split not in MNIST_FILES:
        raise ContractError(f"split must be train or test, got {split!r}")
    images_stem, labels_stem = MNIST_FILES[split]
    directory = Path(directory)
    return load_idx(_find(directory, images_stem), _find(directory, labels_stem), name, split)


def synthetic_bounds(kind: str, noise: float) -> Tuple[np.ndarray, np.ndarray]:
    """Raw-coordinate box mapped onto [0, 1]: the noise-free extent padded by a few noise stds."""
    if kind == "blobs":
        lo, hi = np.array([-1.0, -1.0]), np.array([1.0, 1.0])
    else:
        lo, hi = np.array([-1.0, -0.5]), np.array([2.0, 1.0])
    pad = SYNTHETIC_PAD_STDS * noise
    return lo - pad, hi + pad


def gen_synthetic(kind: str, n: int, noise: float, seed: int, split: str = "train") -> DatasetHandle:
    """Two-class 2-D data shaped N x 1 x 1 x 2 and mapped into [0, 1].

    ``blobs`` are Gaussians of std ``noise`` around (-1, -1) and (1, 1);
    ``moons`` are two interleaved half circles with Gaussian jitter. The map
    into [0, 1] depends only on ``kind`` and ``noise`` (see
    ``synthetic_bounds``), so splits drawn with different ``n`` or ``seed``
    share one coordinate system. Points beyond the padded box are clipped.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ContractError(f"kind must be one of {SYNTHETIC_KINDS}, got {kind!r}")
    if n < 0 or noise < 0:
        raise ContractError("n and noise must be >= 0")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    if kind == "blobs":
        centers = np.where(labels[:, None] == 0, -1.0, 1.0) * np.ones((n, 2))
        points = centers + rng.normal(0.0, noise, size=(n, 2)) if noise > 0 else centers
    else:
        t = rng.uniform(0.0, np.pi, size=n)
        outer = np.stack([np.cos(t), np.sin(t)], axis=1)
        inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        points = np.where(labels[:, None] == 0, outer, inner)
        if noise > 0:
            points = points + rng.normal(0.0, noise, size=(n, 2))
    lo, hi = synthetic_bounds(kind, noise)
    points = np.clip((points - lo) / (hi - lo), 0.0, 1.0)
    return DatasetHandle(kind, split, points.reshape(n, 1, 1, 2), labels)
