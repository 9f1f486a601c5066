"""Seeded Random Hadamard Transform (RHT).

Each contiguous slice of length ``k`` along the chosen axis is multiplied by
``H @ diag(signs)`` where ``H`` is the normalized Sylvester Hadamard matrix.
Because ``H S`` is orthogonal, transforming both operands of a contraction
along the contracted axis leaves the product unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._validation import is_power_of_two

__all__ = ["RhtSpec", "hadamard_matrix", "fwht", "rht_apply", "rht_apply_transpose"]

MAX_EXPLICIT = 2 ** 14


def hadamard_matrix(n: int) -> np.ndarray:
    """Normalized Hadamard matrix built by recursive doubling from ``[1]``."""
    if not is_power_of_two(n):
        raise ValueError(f"Hadamard size must be a power of two, got {n}")
    if n > MAX_EXPLICIT:
        raise ValueError(f"explicit Hadamard matrices are limited to n <= {MAX_EXPLICIT}")
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]]) / np.sqrt(2.0)
    return h


def fwht(x: np.ndarray) -> np.ndarray:
    """Normalized fast Walsh-Hadamard transform along the last axis (length a power of two)."""
    x = np.array(x, dtype=np.result_type(x, np.float32), copy=True)
    n = x.shape[-1]
    if not is_power_of_two(n):
        raise ValueError(f"FWHT length must be a power of two, got {n}")
    lead = x.shape[:-1]
    h = 1
    while h < n:
        y = x.reshape(*lead, n // (2 * h), 2, h)
        a = y[..., 0, :].copy()
        y[..., 0, :] += y[..., 1, :]
        y[..., 1, :] = a - y[..., 1, :]
        h *= 2
    return x * (1.0 / np.sqrt(n))


@dataclass(frozen=True)
class RhtSpec:
    """One transform instance: block size ``k`` and a seed for the ±1 diagonal.

    With ``per_slice=False`` every k-slice shares one sign vector; otherwise
    slice ``i`` draws its own signs from ``(seed, i)``.
    """

    k: int = 64
    seed: int = 0
    per_slice: bool = False

    def __post_init__(self):
        if not is_power_of_two(self.k):
            raise ValueError(f"RHT block size must be a power of two, got {self.k}")

    @property
    def signs(self) -> np.ndarray:
        return self.slice_signs(0)

    def slice_signs(self, index: int) -> np.ndarray:
        mask = (1 << 64) - 1
        key = [int(self.seed) & mask, (int(index) if self.per_slice else 0) & mask]
        bits = np.random.Generator(np.random.Philox(key=key)).integers(0, 2, size=self.k)
        return 1.0 - 2.0 * bits

    def sign_matrix(self, n_slices: int) -> np.ndarray:
        if not self.per_slice:
            return np.broadcast_to(self.signs, (n_slices, self.k))
        return np.stack([self.slice_signs(i) for i in range(n_slices)])

    def matrix(self, index: int = 0) -> np.ndarray:
        """Explicit ``H @ diag(signs)`` for slice ``index``."""
        return hadamard_matrix(self.k) * self.slice_signs(index)[None, :]


def _slices(x: np.ndarray, k: int, dim: int):
    """Move ``dim`` last, zero-pad to a multiple of k and split into (..., n_slices, k)."""
    x = np.moveaxis(np.asarray(x), dim, -1)
    n = x.shape[-1]
    n_slices = -(-n // k)
    if n_slices * k != n:
        pad = [(0, 0)] * (x.ndim - 1) + [(0, n_slices * k - n)]
        x = np.pad(x, pad)
    return x.reshape(*x.shape[:-1], n_slices, k), n_slices


def rht_apply(x: np.ndarray, spec: RhtSpec, dim: int = 0) -> np.ndarray:
    """Apply ``H S`` to every k-slice of ``x`` along ``dim``.

    If the axis length is not a multiple of ``k`` it is zero-padded and the
    output keeps the padded length; pass the original length to
    :func:`rht_apply_transpose` to undo it.
    """
    x = np.asarray(x)
    dim = dim % x.ndim
    if _kernels.available() and x.dtype in (np.float32, np.float64):
        return _rht_compiled(x, spec, dim)
    s, n_slices = _slices(x, spec.k, dim)
    y = fwht(s * spec.sign_matrix(n_slices).astype(s.dtype, copy=False))
    y = y.reshape(*y.shape[:-2], n_slices * spec.k)
    return np.moveaxis(y, -1, dim)


def _rht_compiled(x, spec, dim):
    # Same butterfly as fwht, run down the rows of a (length, rest) buffer.
    k = spec.k
    xm = np.moveaxis(x, dim, 0)
    n = xm.shape[0]
    n_slices = -(-n // k)
    buf = np.zeros((n_slices * k,) + xm.shape[1:], dtype=x.dtype)
    buf[:n] = xm
    flat = buf.reshape(n_slices * k, -1)
    signs = spec.sign_matrix(1 if not spec.per_slice else n_slices)
    _kernels.rht_rows(flat, np.ascontiguousarray(signs, dtype=x.dtype), k)
    return np.moveaxis(buf, 0, dim)


def rht_apply_transpose(x: np.ndarray, spec: RhtSpec, dim: int = 0, length: int | None = None) -> np.ndarray:
    """Inverse of :func:`rht_apply`: ``S H^T`` per slice, cropped to ``length``."""
    x = np.asarray(x)
    dim = dim % x.ndim
    s, n_slices = _slices(x, spec.k, dim)
    y = fwht(s) * spec.sign_matrix(n_slices).astype(s.dtype, copy=False)  # H is symmetric
    y = y.reshape(*y.shape[:-2], n_slices * spec.k)
    if length is not None:
        y = y[..., :length]
    return np.moveaxis(y, -1, dim)
