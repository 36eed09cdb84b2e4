"""Input validation helpers shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np

from .errors import DataError, ShapeError


class NotFittedError(ValueError):
    """The estimator must be fitted before this call."""


def check_array(x, name: str = "X", allow_ndim: tuple[int, ...] = (2, 4)) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim not in allow_ndim:
        raise ShapeError(f"{name} must have ndim in {allow_ndim}, got {arr.ndim}")
    if arr.size == 0:
        raise DataError(f"{name} is empty")
    if not np.isfinite(arr).all():
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_X_y(x, y):
    arr = check_array(x)
    labels = np.asarray(y)
    if labels.ndim != 1 or len(labels) != len(arr):
        raise ShapeError(
            f"y must be 1-D with {len(arr)} entries, got shape {labels.shape}")
    return arr, labels


def as_image_batch(x: np.ndarray) -> np.ndarray:
    """Lift 2-D feature matrices to [n,1,1,f]; pass 4-D image batches through."""
    if x.ndim == 2:
        return x.reshape(len(x), 1, 1, -1)
    return x


def check_is_fitted(estimator, attribute: str) -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit first")
