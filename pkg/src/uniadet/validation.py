"""Input validation helpers used by the estimator API and the functional core."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ValidationError


def as_float_array(x, name: str, *, ndim: int | None = None, dtype=np.float64) -> np.ndarray:
    """Coerce to a float ndarray, rejecting non-finite values."""
    arr = np.asarray(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_vector(x, name: str) -> np.ndarray:
    v = as_float_array(x, name, ndim=1)
    if v.size == 0:
        raise ValidationError(f"{name} must be non-empty")
    return v


def check_binary_mask(mask, name: str = "mask") -> np.ndarray:
    """Coerce to a 2-d {0,1} uint8 array; any nonzero input counts as anomalous."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    return (arr != 0).astype(np.uint8)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValidationError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def check_positive(value: float, name: str) -> float:
    if not value > 0:
        raise ValidationError(f"{name} must be positive, got {value!r}")
    return float(value)


def check_unit_interval(value: float, name: str) -> float:
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value!r}")
    return float(value)


def unit_rows(x: np.ndarray, name: str = "tokens") -> np.ndarray:
    """Normalize the last axis to unit Euclidean norm.

    Uses sqrt((x*x).sum(-1)) rather than np.linalg.norm so that row-wise and
    single-vector calls produce bit-identical results; the exact-kNN path
    relies on this.
    """
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise ValidationError(f"{name}: zero-norm vector (cosine similarity undefined)")
    return x / norms


def check_weight_matrix(w, name: str) -> np.ndarray:
    """Validate a d-by-2 weight matrix with non-zero, finite columns."""
    arr = as_float_array(w, name, ndim=2)
    if arr.shape[1] != 2:
        raise ValidationError(f"{name} must have exactly 2 columns (normal, anomaly), got {arr.shape}")
    col_norms = np.sqrt((arr * arr).sum(axis=0))
    if np.any(col_norms == 0.0):
        raise ValidationError(f"{name} has a zero column; cosine similarity is undefined")
    return arr


def check_probability_map(p: np.ndarray, name: str = "map") -> None:
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValidationError(f"{name} has values outside [0, 1]")


def check_labels_binary(labels: Sequence[int], name: str = "labels") -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-dimensional")
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError(f"{name} must be binary (0 = normal, 1 = anomaly)")
    return arr.astype(np.int64)
