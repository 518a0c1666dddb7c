"""Input validation helpers shared by the estimators and analysis functions."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import LabelOutOfRange, ShapeMismatch


def check_images(
    X,
    *,
    shape: Optional[Sequence[int]] = None,
    allow_single: bool = True,
    check_range: bool = False,
    dtype=np.float64,
) -> np.ndarray:
    """Return ``X`` as a float (N, C, H, W) array.

    A single (C, H, W) image is promoted to a batch of one when
    ``allow_single``. ``shape`` pins (C, H, W); ``check_range`` enforces
    pixel values in [0, 1].
    """
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 3 and allow_single:
        X = X[None]
    if X.ndim != 4:
        raise ShapeMismatch(f"expected images of shape (N, C, H, W), got {X.shape}")
    if shape is not None and tuple(X.shape[1:]) != tuple(shape):
        raise ShapeMismatch(f"expected images of shape (N, {', '.join(map(str, shape))}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    if check_range and X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_labels(y, n_samples: Optional[int] = None, n_classes: Optional[int] = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 0:
        y = y[None]
    if y.ndim != 1:
        raise ShapeMismatch(f"labels must be 1-d, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if n_samples is not None and len(y) != n_samples:
        raise ShapeMismatch(f"got {len(y)} labels for {n_samples} samples")
    if y.size and y.min() < 0:
        raise LabelOutOfRange("labels must be non-negative")
    if n_classes is not None and y.size and y.max() >= n_classes:
        raise LabelOutOfRange(f"label {int(y.max())} outside 0..{n_classes - 1}")
    return y


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"shapes differ: {np.shape(a)} vs {np.shape(b)}")
