"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def check_cloud(points, name: str = "cloud", n_points: int | None = None) -> np.ndarray:
    """Return ``points`` as a finite float64 ``(N, 3)`` array or raise DataError."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 1:
        raise DataError(f"{name}: expected shape (N, 3) with N >= 1, got {arr.shape}")
    if n_points is not None and arr.shape[0] != n_points:
        raise DataError(f"{name}: expected {n_points} points, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name}: contains non-finite coordinates")
    return arr


def check_point_clouds(X, name: str = "X", n_points: int | None = None) -> np.ndarray:
    """Validate a stack of clouds.

    Accepts a ``(B, N, 3)`` array or a sequence of ``(N, 3)`` arrays of equal
    size; a single ``(N, 3)`` cloud is promoted to a batch of one.
    """
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = X[None]
    clouds = [check_cloud(c, f"{name}[{i}]", n_points) for i, c in enumerate(X)]
    if not clouds:
        raise DataError(f"{name}: empty batch")
    sizes = {c.shape[0] for c in clouds}
    if len(sizes) != 1:
        raise DataError(f"{name}: clouds have different sizes {sorted(sizes)}")
    return np.stack(clouds)


def check_consistent_length(X: np.ndarray, y: np.ndarray) -> None:
    if len(X) != len(y):
        raise DataError(f"found {len(X)} partial clouds but {len(y)} ground-truth clouds")
