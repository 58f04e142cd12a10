"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    pass


def check_feature_matrix(x, feature_dim: int | None = None, *, name: str = "X") -> np.ndarray:
    """Coerce to a 2-d float64 matrix; a single vector becomes one row."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-d, got shape {arr.shape}")
    if feature_dim is not None and arr.shape[1] != feature_dim:
        raise ValidationError(
            f"{name} has {arr.shape[1]} columns, expected feature dimension {feature_dim}"
        )
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_labels(y, n_classes: int, *, n_rows: int | None = None, name: str = "y") -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-d, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == arr.astype(np.int64)):
            raise ValidationError(f"{name} must hold integer class labels")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ValidationError(
            f"{name} labels must lie in [0, {n_classes}), got range "
            f"[{arr.min()}, {arr.max()}]"
        )
    if n_rows is not None and arr.shape[0] != n_rows:
        raise ValidationError(f"{name} has {arr.shape[0]} rows, expected {n_rows}")
    return arr


def check_token_ids(seq, vocab_size: int, *, name: str = "tokens") -> np.ndarray:
    arr = np.asarray(seq, dtype=np.int64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be a flat id sequence, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        bad = int(arr[(arr < 0) | (arr >= vocab_size)][0])
        raise ValidationError(f"{name}: id {bad} outside vocabulary of size {vocab_size}")
    return arr


def check_fitted(estimator, attr: str) -> None:
    if not hasattr(estimator, attr):
        raise ValidationError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )
