"""Input validation helpers shared across the package.

Signals are plain numpy float arrays; the array rank encodes the group:
a 1-D array of length d lives on the cyclic line group Z_d, a 2-D array
of shape (H, W) lives on the torus group Z_H x Z_W. Shift indices are a
plain int for 1-D signals and an (row, col) integer pair for 2-D ones.
"""

from __future__ import annotations

import numbers

import numpy as np


def as_signal(x, name: str = "signal") -> np.ndarray:
    """Coerce ``x`` to a float64 signal array and validate it.

    Accepts 1-D (line) and 2-D (grid) layouts, requires at least one
    entry per axis, and rejects non-finite values.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise ValueError(f"{name} must be a 1-D or 2-D array, got ndim={arr.ndim}")
    if arr.size == 0 or min(arr.shape) < 1:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_spectrum(X, name: str = "spectrum") -> np.ndarray:
    """Coerce ``X`` to a complex128 spectrum array (1-D or 2-D)."""
    arr = np.asarray(X, dtype=np.complex128)
    if arr.ndim not in (1, 2):
        raise ValueError(f"{name} must be a 1-D or 2-D array, got ndim={arr.ndim}")
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_same_geometry(a: np.ndarray, b: np.ndarray, what: str = "signals") -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} have mismatched geometry: {a.shape} vs {b.shape}")


def as_shift(shape: tuple[int, ...], ell, name: str = "shift"):
    """Validate a shift index against a signal shape and reduce it modulo the group.

    Returns an int for 1-D shapes and a (row, col) int tuple for 2-D shapes.
    Integers are reduced modulo the axis length, so negative shifts denote
    inverse group elements.
    """
    if len(shape) == 1:
        if not isinstance(ell, numbers.Integral):
            raise ValueError(f"{name} for a 1-D signal must be an integer, got {ell!r}")
        return int(ell) % shape[0]
    try:
        r, c = ell
    except (TypeError, ValueError):
        raise ValueError(f"{name} for a 2-D signal must be a (row, col) pair, got {ell!r}") from None
    if not (isinstance(r, numbers.Integral) and isinstance(c, numbers.Integral)):
        raise ValueError(f"{name} components must be integers, got {ell!r}")
    return (int(r) % shape[0], int(c) % shape[1])


def check_sigma(sigma, allow_zero: bool = False) -> float:
    if sigma is None:
        raise ValueError("a noise level sigma is required but none was given")
    sigma = float(sigma)
    if not np.isfinite(sigma):
        raise ValueError("sigma must be finite")
    if allow_zero:
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
    elif sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    return sigma


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value <= 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_nonnegative_int(value, name: str) -> int:
    if not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value < 0:
        raise ValueError(f"{name} must be >= 0, got {value}")
    return value
