"""Input validation helpers shared by the codecs, quantizers and estimators."""

from __future__ import annotations

import numpy as np


class MalformedInputError(ValueError):
    """Raised when packed bytes or a file do not match the documented layout."""


class InvalidValueError(ValueError):
    """Raised when a tensor holds NaN or infinite entries."""


class StateError(RuntimeError):
    """Raised when a stateful layer is used out of order (e.g. backward before forward)."""


SCHEMES = ("mxfp4", "hif4")


def check_scheme(scheme: str) -> str:
    s = str(scheme).lower()
    if s not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    return s


def check_finite(x: np.ndarray, name: str = "input") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise InvalidValueError(f"{name} contains non-finite values")
    return x


def check_matrix(x, name: str = "input", *, finite: bool = True) -> np.ndarray:
    """Return ``x`` as a 2-D float array with no zero-length dimension."""
    arr = np.asarray(x)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if 0 in arr.shape:
        raise ValueError(f"{name} has a zero-length dimension: {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if finite:
        check_finite(arr, name)
    return arr


def is_power_of_two(n: int) -> bool:
    return isinstance(n, (int, np.integer)) and n > 0 and (n & (n - 1)) == 0
