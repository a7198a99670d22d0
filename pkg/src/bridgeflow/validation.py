"""Input validation helpers shared by the estimator-facing API."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import N_CATEGORIES

__all__ = [
    "check_array",
    "check_window_tensor",
    "check_labels",
    "check_consistent_length",
    "raise_on_violations",
]


def check_array(x, name: str = "array", ndim: int | None = None) -> np.ndarray:
    """Coerce to a float64 ndarray and reject non-finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-d, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_window_tensor(x, name: str = "X") -> np.ndarray:
    """Validate a stacked window tensor of shape [n, nodes, channels, steps]."""
    arr = check_array(x, name=name, ndim=4)
    if arr.shape[0] == 0:
        raise ValueError(f"{name} must contain at least one window")
    return arr


def check_labels(y, n_samples: int, name: str = "y") -> np.ndarray:
    """Validate a label matrix of shape [n, N_CATEGORIES]."""
    arr = check_array(y, name=name, ndim=2)
    if arr.shape != (n_samples, N_CATEGORIES):
        raise ValueError(
            f"{name} must have shape ({n_samples}, {N_CATEGORIES}), got {arr.shape}"
        )
    if np.any(arr < 0):
        raise ValueError(f"{name} entries must be non-negative counts")
    return arr


def check_consistent_length(*arrays: Sequence) -> None:
    lengths = {len(a) for a in arrays if a is not None}
    if len(lengths) > 1:
        raise ValueError(f"inconsistent lengths: {sorted(lengths)}")


def raise_on_violations(obj, *args, **kwargs) -> None:
    """Raise ValueError listing all invariant violations of a record type."""
    violations = obj.violations(*args, **kwargs)
    if violations:
        raise ValueError(f"{type(obj).__name__} invalid: " + "; ".join(violations))
