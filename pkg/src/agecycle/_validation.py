"""Input validation helpers and the exception types raised across the package."""

from __future__ import annotations

import numpy as np


class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class DatasetDegenerateError(ValueError):
    """The dataset cannot support the requested sampling."""


class DivergenceError(FloatingPointError):
    """Training produced non-finite values.

    ``report`` carries whatever diagnostics were available at the failing step.
    """

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report or {}


def check_image(image, resolution: int | None = None, name: str = "image") -> np.ndarray:
    """Validate a single H x W x 3 image with values in [-1, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise InvalidInputError(f"{name} must be H x W x 3, got shape {arr.shape}")
    if resolution is not None and arr.shape[:2] != (resolution, resolution):
        raise InvalidInputError(
            f"{name} must be {resolution} x {resolution}, got {arr.shape[0]} x {arr.shape[1]}"
        )
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def check_image_batch(images, resolution: int | None = None, name: str = "images") -> np.ndarray:
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise InvalidInputError(f"{name} must be B x H x W x 3, got shape {arr.shape}")
    if resolution is not None and arr.shape[1:3] != (resolution, resolution):
        raise InvalidInputError(
            f"{name} must be {resolution} x {resolution}, got {arr.shape[1]} x {arr.shape[2]}"
        )
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def is_one_hot(vec) -> bool:
    v = np.asarray(vec)
    return v.ndim == 1 and v.size >= 1 and bool(np.all((v == 0) | (v == 1))) and v.sum() == 1


def check_one_hot(condition, n_groups: int | None = None, name: str = "condition") -> np.ndarray:
    """Validate a one-hot vector (or a batch of them, one per row)."""
    arr = np.asarray(condition, dtype=np.float64)
    rows = arr[None] if arr.ndim == 1 else arr
    if rows.ndim != 2:
        raise InvalidInputError(f"{name} must be a vector or a matrix of vectors")
    if n_groups is not None and rows.shape[1] != n_groups:
        raise InvalidInputError(f"{name} must have length {n_groups}, got {rows.shape[1]}")
    for i, row in enumerate(rows):
        if not is_one_hot(row):
            raise InvalidInputError(f"{name} row {i} is not one-hot: {row.tolist()}")
    return arr


def check_fraction(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 < value < 1.0:
        raise InvalidInputError(f"{name} must lie strictly between 0 and 1, got {value}")
    return value


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or int(value) != value or int(value) < 1:
        raise InvalidInputError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
