"""Input validation helpers shared by the numeric modules and the estimator."""

from __future__ import annotations

import numpy as np


def check_matrix(m, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have at least one row and column, got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def check_tensor4(t, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(t)
    if arr.ndim != 4:
        raise ValueError(f"{name} must be 4-D, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def check_binary_mask(mask, name: str = "mask") -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be binary")
    return arr.astype(bool)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "arrays") -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} differ in shape: {a.shape} vs {b.shape}")


def check_stage_set(stages) -> frozenset[int]:
    out = frozenset(int(s) for s in stages)
    bad = sorted(s for s in out if s not in (1, 2, 3, 4))
    if bad:
        raise ValueError(f"stage set references stages outside 1-4: {bad}")
    return out
