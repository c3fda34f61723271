"""Small argument-checking helpers shared across modules.

These are deliberately lighter than sklearn's ``check_array`` machinery:
most inputs here are scalars, parameter vectors, or frozen config objects
rather than 2-D sample matrices.
"""

from __future__ import annotations

import numbers

import numpy as np


def check_rng(seed_or_rng) -> np.random.Generator:
    """Return a ``numpy.random.Generator`` for ``seed_or_rng``.

    Accepts an existing Generator (returned as-is), an integer seed, or
    None for OS-entropy seeding.
    """
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    if seed_or_rng is None or isinstance(seed_or_rng, (int, np.integer)):
        return np.random.default_rng(seed_or_rng)
    raise TypeError(
        f"expected None, an int seed, or a numpy Generator, got {type(seed_or_rng).__name__}"
    )


def check_scalar(name: str, value, *, minimum=None, maximum=None,
                 strict_min=False, strict_max=False) -> float:
    """Validate a finite real scalar, optionally against bounds."""
    if not isinstance(value, numbers.Real) or isinstance(value, bool):
        raise TypeError(f"{name} must be a real number, got {type(value).__name__}")
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value}")
    if minimum is not None:
        if strict_min and not value > minimum:
            raise ValueError(f"{name} must be > {minimum}, got {value}")
        if not strict_min and not value >= minimum:
            raise ValueError(f"{name} must be >= {minimum}, got {value}")
    if maximum is not None:
        if strict_max and not value < maximum:
            raise ValueError(f"{name} must be < {maximum}, got {value}")
        if not strict_max and not value <= maximum:
            raise ValueError(f"{name} must be <= {maximum}, got {value}")
    return value


def check_vector(name: str, value, *, size=None, finite=True) -> np.ndarray:
    """Coerce to a 1-D float64 array, optionally checking length and finiteness."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if size is not None and arr.shape[0] != size:
        raise ValueError(f"{name} must have length {size}, got {arr.shape[0]}")
    if finite and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def check_matrix(name: str, value, *, shape=None, finite=True) -> np.ndarray:
    """Coerce to a 2-D float64 array, optionally checking shape and finiteness."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} must have shape {tuple(shape)}, got {arr.shape}")
    if finite and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr
