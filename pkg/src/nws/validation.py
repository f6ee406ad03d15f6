"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, column_or_1d

from .errors import DimensionError, InvalidInputError
from .tensor import get_default_dtype


def check_images(X, channels: int | None = None) -> np.ndarray:
    """Return ``X`` as a finite ``(N, C, H, W)`` array in the working precision."""
    try:
        arr = check_array(X, allow_nd=True, dtype=get_default_dtype(), ensure_min_samples=1)
    except ValueError as exc:
        raise InvalidInputError(str(exc)) from None
    if arr.ndim != 4:
        raise DimensionError(f"images must be (N, C, H, W), got {arr.shape}")
    if channels is not None and arr.shape[1] != channels:
        raise DimensionError(f"images have {arr.shape[1]} channels, expected {channels}")
    return arr


def check_labels(y, n_samples: int) -> np.ndarray:
    try:
        y = column_or_1d(y)
    except ValueError as exc:
        raise InvalidInputError(str(exc)) from None
    if len(y) != n_samples:
        raise InvalidInputError(f"{n_samples} images but {len(y)} labels")
    return y


def encode_labels(y) -> tuple:
    """``(classes, positions)``: sorted unique labels and each label's position among them."""
    classes, positions = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise InvalidInputError("at least two classes are required")
    return classes, positions.astype(np.int64)
