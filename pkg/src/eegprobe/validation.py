"""Input validation helpers shared by the transforms and estimators."""

from __future__ import annotations

import numpy as np

_SEED_MASK = (1 << 64) - 1


def check_trial_matrix(x, *, min_samples: int = 2, require_finite: bool = True) -> np.ndarray:
    """Coerce ``x`` to a 2-D float64 (channels, samples) array and validate it."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[np.newaxis, :]
    if arr.ndim != 2:
        raise ValueError(f"expected a (channels, samples) matrix, got {arr.ndim}-D input")
    if arr.shape[1] < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {arr.shape[1]}")
    if require_finite and not np.all(np.isfinite(arr)):
        raise ValueError("non-finite sample in input")
    return arr


def check_trial_stack(x, *, min_samples: int = 2) -> np.ndarray:
    """Coerce ``x`` to a 3-D float64 (trials, channels, samples) array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[np.newaxis, :, :]
    if arr.ndim != 3:
        raise ValueError(f"expected (trials, channels, samples), got {arr.ndim}-D input")
    if arr.shape[2] < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {arr.shape[2]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite sample in input")
    return arr


def check_mask(mask, n_channels: int) -> np.ndarray:
    """Coerce a channel mask to uint8 of length ``n_channels``, values in {0, 1}."""
    values = np.asarray(getattr(mask, "values", mask))
    values = np.atleast_1d(values)
    if values.ndim != 1 or values.shape[0] != n_channels:
        raise ValueError(f"mask length {values.shape} does not match {n_channels} channels")
    values = values.astype(np.uint8)
    if not np.all((values == 0) | (values == 1)):
        raise ValueError("mask entries must be 0 or 1")
    return values


def check_labels(y, n_classes: int | None = None) -> np.ndarray:
    """Coerce class labels to a 1-D int64 array, optionally bounded by ``n_classes``."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        rounded = np.rint(np.asarray(arr, dtype=np.float64))
        if not np.array_equal(rounded, np.asarray(arr, dtype=np.float64)):
            raise ValueError("labels must be integers")
        arr = rounded
    arr = arr.astype(np.int64)
    if arr.size and arr.min() < 0:
        raise ValueError("labels must be >= 0")
    if n_classes is not None and arr.size and arr.max() >= n_classes:
        raise ValueError(f"label {arr.max()} out of range for {n_classes} classes")
    return arr


def as_seed(seed) -> int:
    """Normalize a seed to an unsigned 64-bit integer."""
    value = int(seed)
    return value & _SEED_MASK
