"""Input checks shared by the estimators and the assembly code."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_snapshot_matrix(S, name="snapshot matrix") -> np.ndarray:
    """Finite 2-D float array with at least one column."""
    S = check_array(S, dtype=np.float64, ensure_2d=True, ensure_min_samples=1, ensure_min_features=1)
    if S.shape[1] < 1:
        raise ValueError(f"{name} has no columns")
    return S


def check_weights(w, n) -> np.ndarray:
    w = check_array(w, dtype=np.float64, ensure_2d=False)
    if w.shape != (n,):
        raise ValueError(f"weights must have shape ({n},), got {w.shape}")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    return w


def check_dimension(a, shape, name) -> np.ndarray:
    """Array with an exact shape; ``None`` entries in ``shape`` are free."""
    a = np.asarray(a, dtype=float)
    if a.ndim != len(shape) or any(s is not None and s != d for s, d in zip(shape, a.shape)):
        raise DimensionError(f"{name} has shape {a.shape}, expected {tuple(shape)}")
    return a


class DimensionError(ValueError):
    """Array sizes are inconsistent with the mesh or basis."""
