"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np


def check_images(X, image_size: int, dtype="float32") -> np.ndarray:
    """Return ``X`` as a ``[n, S, S, 3]`` array of ``dtype`` with values in [0, 1]."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images shaped [n, H, W, 3], got {X.shape}")
    if X.shape[1:3] != (image_size, image_size):
        raise ValueError(f"expected {image_size}x{image_size} images, got {X.shape[1]}x{X.shape[2]}")
    if X.dtype.kind not in "fiu":
        raise TypeError(f"images must be numeric, got {X.dtype}")
    X = X.astype(dtype, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_paired(X: np.ndarray, X_nbi, dtype="float32") -> np.ndarray:
    X_nbi = check_images(X_nbi, X.shape[1], dtype=dtype)
    if X_nbi.shape != X.shape:
        raise ValueError(f"WL and NBI batches differ in shape: {X.shape} vs {X_nbi.shape}")
    return X_nbi


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if y.size and not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 (hyperplastic) or 1 (adenomatous)")
    return y.astype(np.int64)
