"""Input validation helpers shared across the package.

Small check functions in the spirit of sklearn's ``check_array``: validate,
coerce, and return, raising ``ValueError`` with a named-argument message on
failure.
"""

from __future__ import annotations

import numpy as np


def check_array_2d(a, name: str, shape: tuple[int, int] | None = None,
                   dtype=np.float64) -> np.ndarray:
    """Coerce to a 2-D array, optionally enforcing an exact shape."""
    arr = np.asarray(a, dtype=dtype)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} must have shape {tuple(shape)}, got {arr.shape}")
    return arr


def check_finite(a, name: str) -> np.ndarray:
    arr = np.asarray(a)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_unit_interval(a, name: str, atol: float = 0.0) -> np.ndarray:
    arr = np.asarray(a)
    if arr.size and (arr.min() < -atol or arr.max() > 1.0 + atol):
        raise ValueError(
            f"{name} must lie in [0, 1], got range [{arr.min()}, {arr.max()}]")
    return arr


def check_positive(value: float, name: str, strict: bool = True) -> float:
    v = float(value)
    if strict and not v > 0:
        raise ValueError(f"{name} must be > 0, got {v}")
    if not strict and v < 0:
        raise ValueError(f"{name} must be >= 0, got {v}")
    return v


def check_in(value, name: str, allowed) -> object:
    if value not in allowed:
        raise ValueError(f"{name} must be one of {sorted(allowed)!r}, got {value!r}")
    return value


def check_binary(a, name: str) -> np.ndarray:
    """A mask of exactly {0, 1} values, any numeric dtype."""
    arr = np.asarray(a)
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError(f"{name} must be binary (0/1), got values {vals[:8]}")
    return arr
