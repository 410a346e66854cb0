"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np


def check_cloud_array(X, n_points: int | None = None, name: str = "X") -> np.ndarray:
    """Coerce to a float64 (n_samples, n_points, 3) stack of point clouds.

    A single (n_points, 3) cloud is promoted to a one-sample batch.
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(
            f"{name} must have shape (n_samples, n_points, 3), got {np.shape(X)}"
        )
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} must contain at least one sample and one point")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite coordinates")
    if n_points is not None and arr.shape[1] != n_points:
        raise ValueError(
            f"{name} has {arr.shape[1]} points per cloud, expected {n_points}"
        )
    return np.ascontiguousarray(arr)


def check_labels(y, n_samples: int, name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"{name} must be a 1-D array of length {n_samples}")
    return y
