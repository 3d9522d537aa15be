"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_spectrograms(X, input_channels: int | None = None, dtype=np.float32) -> np.ndarray:
    """Validate a ``[N, C, F, T]`` batch of banded spectrograms."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=dtype, order="C")
    if X.ndim != 4:
        raise ValueError(f"expected a [N, C, F, T] array, got shape {X.shape}")
    if input_channels is not None and X.shape[1] != input_channels:
        raise ValueError(f"expected {input_channels} channels, got {X.shape[1]}")
    return X


def check_embeddings(V) -> np.ndarray:
    V = check_array(V, dtype=np.float64)
    norms = np.linalg.norm(V, axis=1)
    if not np.allclose(norms, 1.0, atol=1e-5):
        raise ValueError("embeddings must have unit norm")
    return V


def check_labels(y, n: int, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integer class indices")
    y = y.astype(np.int64)
    if len(y) and y.min() < 0:
        raise ValueError("labels must be non-negative")
    if num_classes is not None and len(y) and y.max() >= num_classes:
        raise ValueError(f"label {y.max()} outside [0, {num_classes})")
    return y


def batch_slices(n: int, batch_size: int):
    """Contiguous batch slices; a trailing singleton is folded into the previous batch."""
    starts = list(range(0, n, batch_size))
    bounds = [(s, min(s + batch_size, n)) for s in starts]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
        bounds[-2] = (bounds[-2][0], n)
        bounds.pop()
    return [slice(a, b) for a, b in bounds]
