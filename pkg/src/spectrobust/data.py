"""Dataset ingestion: a synthetic oriented-grating corpus and IDX files."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .errors import LabelOutOfRange, MalformedIdx

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Images in [0, 1] with shape (N, C, H, W) and integer labels in 0..K-1."""

    images: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise LabelOutOfRange(f"labels must lie in 0..{self.n_classes - 1}")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.n_classes)


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 4
    per_class: int = 500
    size: int = 32
    channels: int = 3
    seed: int = 7
    noise: float = 0.03
    contrast: Tuple[float, float] = (0.12, 0.3)


def make_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> Dataset:
    """K-class oriented gratings over a tinted background with a random blob.

    Class k sets the grating orientation near k*pi/K, so each class puts its
    spectral energy along a different direction. Frequency, phase, contrast,
    tint, blob and noise are nuisance factors drawn per image.
    """
    rng = np.random.default_rng(spec.seed)
    k, n, s, c = spec.n_classes, spec.per_class, spec.size, spec.channels
    total = k * n
    labels = np.repeat(np.arange(k), n)
    labels = labels[rng.permutation(total)]

    spacing = np.pi / k
    theta = labels * spacing + rng.uniform(-0.3, 0.3, total) * spacing
    freq = rng.uniform(2.5, 5.5, total) / s
    offset = rng.uniform(0, 2 * np.pi, total)
    contrast = rng.uniform(spec.contrast[0], spec.contrast[1], total)
    tint = rng.uniform(0.5, 1.0, (total, c))
    background = rng.uniform(0.3, 0.7, (total, c))
    blob_center = rng.uniform(0.2 * s, 0.8 * s, (total, 2))
    blob_sigma = rng.uniform(2.0, 6.0, total)
    blob_amp = rng.uniform(-0.3, 0.3, (total, c))

    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    proj = (np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy)
    grating = np.sin(2 * np.pi * freq[:, None, None] * proj + offset[:, None, None])
    d2 = (xx - blob_center[:, 0, None, None]) ** 2 + (yy - blob_center[:, 1, None, None]) ** 2
    blob = np.exp(-d2 / (2 * blob_sigma[:, None, None] ** 2))

    images = (
        background[:, :, None, None]
        + (contrast[:, None] * tint)[:, :, None, None] * grating[:, None]
        + blob_amp[:, :, None, None] * blob[:, None]
        + rng.normal(0.0, spec.noise, (total, c, s, s))
    )
    return Dataset(np.clip(images, 0.0, 1.0), labels, k)


def split(dataset: Dataset, fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15), seed: int = 0):
    """Shuffle and cut into train/validation/test parts."""
    if not np.isclose(sum(fractions), 1.0):
        raise ValueError("split fractions must sum to 1")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_train = int(round(fractions[0] * len(dataset)))
    n_val = int(round(fractions[1] * len(dataset)))
    return (
        dataset.subset(order[:n_train]),
        dataset.subset(order[n_train : n_train + n_val]),
        dataset.subset(order[n_train + n_val :]),
    )


# ---------------------------------------------------------------------- IDX


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path: Union[str, Path]) -> np.ndarray:
    """Read an unsigned-byte IDX array (big-endian header)."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise MalformedIdx(f"{path}: file shorter than the magic number")
    zero, dtype_code, ndim = raw[0:2], raw[2], raw[3]
    if zero != b"\x00\x00" or dtype_code != 0x08 or ndim == 0:
        raise MalformedIdx(f"{path}: unsupported magic {raw[:4].hex()}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise MalformedIdx(f"{path}: truncated dimension header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header != expected:
        raise MalformedIdx(f"{path}: expected {expected} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path: Union[str, Path], array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(">" + "I" * array.ndim, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx_dataset(images_path, labels_path, n_classes: Optional[int] = None) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise MalformedIdx(f"image file must be 3-d (N, H, W), got {images.ndim}-d")
    if labels.ndim != 1 or len(labels) != len(images):
        raise MalformedIdx("label file must be 1-d and match the image count")
    k = int(labels.max()) + 1 if n_classes is None else int(n_classes)
    if labels.size and labels.max() >= k:
        raise LabelOutOfRange(f"label {int(labels.max())} outside 0..{k - 1}")
    return Dataset(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64), k)
