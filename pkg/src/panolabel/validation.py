"""Input validation helpers shared by the typed grids and the estimators."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def check_ndim(name: str, arr: np.ndarray, ndim: int) -> None:
    if arr.ndim != ndim:
        raise ValidationError(f"{name}: expected {ndim} dimensions, got shape {arr.shape}")


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name}: contains NaN or Inf values")


def check_nonempty(name: str, arr: np.ndarray) -> None:
    if arr.size == 0:
        raise ValidationError(f"{name}: empty array")


def check_same_hw(name_a: str, a: np.ndarray, name_b: str, b: np.ndarray) -> None:
    if a.shape[:2] != b.shape[:2]:
        raise ValidationError(
            f"{name_a} and {name_b} disagree on spatial size: {a.shape[:2]} vs {b.shape[:2]}"
        )


def check_positive(name: str, value: float) -> None:
    if not value > 0:
        raise ValidationError(f"{name}: must be positive, got {value}")


def as_int_grid(name: str, arr, dtype) -> np.ndarray:
    """Coerce an integer label grid to `dtype`, rejecting out-of-range values."""
    a = np.asarray(arr)
    if not np.issubdtype(a.dtype, np.integer):
        raise ValidationError(f"{name}: expected an integer array, got dtype {a.dtype}")
    info = np.iinfo(dtype)
    if a.size and (a.min() < info.min or a.max() > info.max):
        raise ValidationError(f"{name}: values outside the {np.dtype(dtype).name} range")
    return np.ascontiguousarray(a.astype(dtype, copy=False))
