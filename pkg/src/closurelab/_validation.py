"""Input validation helpers used by the public API."""

import numpy as np

from .exceptions import DimMismatchError, EmptyInputError


def check_state(x, dim=3, name="state"):
    """Coerce ``x`` to a finite float64 vector of length ``dim``."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (dim,):
        raise DimMismatchError(f"{name} must have shape ({dim},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_states(x, dim=3, name="states"):
    """Coerce ``x`` to a finite float64 array of shape (n, dim).

    A single vector of length ``dim`` is promoted to shape (1, dim).
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == dim:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise DimMismatchError(f"{name} must have shape (n, {dim}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_samples(a, name="samples"):
    """Coerce to a nonempty 1-D float64 sample array."""
    arr = np.asarray(a, dtype=np.float64).ravel()
    if arr.size == 0:
        raise EmptyInputError(f"{name} is empty")
    return arr


def check_positive(value, name):
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise ValueError(f"{name} must be positive and finite, got {value}")
    return value


def check_count(value, name, minimum=1):
    count = int(value)
    if count < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {count}")
    return count
