"""Input validation helpers shared across the package.

Small, sklearn-``check_array``-flavored utilities that normalize user input
to float64 ndarrays and fail fast with readable messages.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "check_array",
    "check_finite",
    "check_shape",
    "check_positive",
    "check_probability",
    "check_unit_interval",
]


def check_array(x, name: str, shape=None, dtype=np.float64) -> np.ndarray:
    """Convert ``x`` to an ndarray of ``dtype`` and optionally check its shape.

    ``shape`` entries of ``None`` act as wildcards, e.g. ``(None, 3)`` accepts
    any number of rows with exactly three columns.
    """
    arr = np.asarray(x, dtype=dtype)
    if shape is not None:
        if arr.ndim != len(shape):
            raise ValueError(
                f"{name} must have {len(shape)} dimensions, got {arr.ndim}"
            )
        for axis, want in enumerate(shape):
            if want is not None and arr.shape[axis] != want:
                raise ValueError(
                    f"{name} has shape {arr.shape}, expected "
                    f"{tuple('N' if s is None else s for s in shape)}"
                )
    return arr


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_shape(arr: np.ndarray, shape: tuple, name: str) -> np.ndarray:
    if arr.shape != shape:
        raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
    return arr


def check_positive(value: float, name: str, strict: bool = True) -> float:
    value = float(value)
    if strict and not value > 0:
        raise ValueError(f"{name} must be > 0, got {value}")
    if not strict and not value >= 0:
        raise ValueError(f"{name} must be >= 0, got {value}")
    return value


def check_probability(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")
    return value


def check_unit_interval(arr: np.ndarray, name: str) -> np.ndarray:
    if arr.size and (np.min(arr) < 0.0 or np.max(arr) > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr
