"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np

__all__ = ["check_finite", "check_shape", "check_range", "as_float_array"]


def check_finite(x, name: str) -> None:
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


def check_shape(x, expected: tuple, name: str) -> None:
    if tuple(np.shape(x)) != tuple(expected):
        raise ValueError(f"{name}: expected shape {tuple(expected)}, got {tuple(np.shape(x))}")


def check_range(value: float, lo: float, hi: float, name: str) -> None:
    if not (lo <= value <= hi):
        raise ValueError(f"{name} must lie in [{lo}, {hi}], got {value}")


def as_float_array(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    check_finite(arr, name)
    return arr
