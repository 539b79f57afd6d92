"""Datasets: IDX ingestion, seeded splits, and synthetic Gaussian blobs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, *sample_shape), values in [0, 1]
    labels: np.ndarray  # (n,), int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_count(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, index) -> Dataset:
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index])


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: file too short for IDX header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic {found:#010x}, expected {magic:#010x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header != size:
        raise FormatError(f"{path}: payload has {len(raw) - header} bytes, header promises {size}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an (uncompressed) IDX image/label pair; pixels are scaled to [0, 1]."""
    pixels = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if len(pixels) != len(labels):
        raise FormatError(f"{len(pixels)} images but {len(labels)} labels")
    images = (pixels.astype(np.float64) / 255.0)[..., None]
    return Dataset(images, labels.astype(np.int64))


def write_idx(images_path, labels_path, pixels: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of :func:`load_idx` for uint8 pixel arrays of shape (n, rows, cols)."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes())


def split(ds: Dataset, val_fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0 < val_fraction < 1:
        raise ContractError(f"val_fraction must lie strictly between 0 and 1, got {val_fraction}")
    n = len(ds)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        raise ContractError(f"val_fraction {val_fraction} leaves an empty side for {n} samples")
    order = np.random.default_rng(seed).permutation(n)
    return ds.subset(np.sort(order[n_val:])), ds.subset(np.sort(order[:n_val]))


def synthetic_blobs(classes: int, n: int, dim, seed: int = 0, spread: float = 0.08,
                    margin: float = 0.05) -> Dataset:
    """Gaussian clusters clipped to the unit box.

    A point is kept only if its nearest class centre is its own by at least
    ``margin`` in distance, so the nearest-centre rule (a linear classifier)
    separates the data. ``dim`` is an int for flat samples or an image shape.
    """
    if classes < 2:
        raise ContractError("synthetic_blobs needs at least two classes")
    shape = (dim,) if isinstance(dim, int) else tuple(dim)
    d = int(np.prod(shape))
    rng = np.random.default_rng(seed)
    centres = rng.uniform(0.2, 0.8, size=(classes, d))
    labels = np.arange(n) % classes
    points = np.empty((n, d))
    for i, y in enumerate(labels):
        while True:
            p = np.clip(centres[y] + spread * rng.standard_normal(d), 0.0, 1.0)
            dist = np.linalg.norm(centres - p, axis=1)
            others = np.delete(dist, y)
            if dist[y] + margin <= others.min():
                points[i] = p
                break
    return Dataset(points.reshape((n, *shape)), labels.astype(np.int64))
