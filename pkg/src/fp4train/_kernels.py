"""Compiled fake-quantization kernels.

These mirror the vectorized reference in :mod:`fp4train.quantize` operation
for operation, so results are bit-identical (checked in the test suite).
They work on row-blocked 2-D views of any stride; callers pass ``x.T`` for
column blocking.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

KIND_NEAREST, KIND_STOCHASTIC, KIND_ADDITIVE = 0, 1, 2
_HALVES = np.array([1.0, 0.5, 0.25])

if njit is not None:

    @njit(cache=True, inline="always")
    def _e2m1_step(m):
        if m < 2.0:
            return 0.5
        if m < 4.0:
            return 1.0
        return 2.0

    @njit(cache=True, inline="always")
    def _round(y, step_kind, top, kind, delta, u):
        # step_kind 0: E2M1 binade spacing, 1: uniform 0.25.
        # Steps are powers of two, so multiplying by 1/step equals dividing.
        if kind == 2:
            s = _e2m1_step(abs(y)) if step_kind == 0 else 0.25
            y = y + (2.0 * u - 1.0) * delta * s
        m = min(abs(y), 2.0 * top)
        step = _e2m1_step(m) if step_kind == 0 else 0.25
        if kind == 1:
            r = m * (1.0 / step)
            lo = math.floor(r)
            q = (lo + (1.0 if u < (r - lo) else 0.0)) * step
        else:
            q = np.rint(m * (1.0 / step)) * step
        return math.copysign(min(q, top), y)

    @njit(cache=True)
    def mx_rows(x, out, kind, delta, tf, u):
        rows, length = x.shape
        nb = (length + 31) // 32
        clips = 0
        for r in range(rows):
            for b in range(nb):
                k0 = b * 32
                k1 = min(k0 + 32, length)
                amax = 0.0
                for k in range(k0, k1):
                    amax = max(amax, abs(float(x[r, k])))
                e = 0
                if amax > 0.0:
                    guess = math.log2(amax / 6.0)
                    if tf:
                        e = int(math.ceil(guess))
                        if math.ldexp(6.0, e - 1) >= amax:
                            e -= 1
                        if math.ldexp(6.0, e) < amax:
                            e += 1
                    else:
                        e = int(math.floor(guess))
                        if math.ldexp(6.0, e + 1) <= amax:
                            e += 1
                        if math.ldexp(6.0, e) > amax:
                            e -= 1
                    e = min(max(e, -127), 127)
                blk = r * nb + b
                # power-of-two products are exact, matching ldexp
                down = math.ldexp(1.0, -e)
                up = math.ldexp(1.0, e)
                for k in range(k0, k1):
                    y = float(x[r, k]) * down
                    clips += abs(y) > 6.0
                    uu = u[blk, k - k0] if kind != 0 else 0.0
                    out[r, k] = _round(y, 0, 6.0, kind, delta, uu) * up
        return clips

    @njit(cache=True)
    def hif_rows(x, out, kind, delta, u, limits, values):
        rows, length = x.shape
        nb = (length + 63) // 64
        clips = 0
        gmax = np.zeros(16)
        gsc = np.zeros(16)
        for r in range(rows):
            for b in range(nb):
                k0 = b * 64
                amax = 0.0
                for g in range(16):
                    base = k0 + 4 * g
                    m = 0.0
                    if base + 4 <= length:
                        m = max(max(abs(float(x[r, base])), abs(float(x[r, base + 1]))),
                                max(abs(float(x[r, base + 2])), abs(float(x[r, base + 3]))))
                    else:
                        for k in range(base, min(base + 4, length)):
                            m = max(m, abs(float(x[r, k])))
                    gmax[g] = m
                    amax = max(amax, m)
                code = 192
                if amax > 0.0:
                    # first code whose limit reaches amax
                    lo, hi = 0, 256
                    while lo < hi:
                        mid = (lo + hi) >> 1
                        if limits[mid] < amax:
                            lo = mid + 1
                        else:
                            hi = mid
                    code = min(lo, 255)
                s1 = values[code]
                limit = 1.75 * s1
                blk = r * nb + b
                for s in range(8):
                    da = (1 if gmax[2 * s] * 2.0 <= limit else 0) + (1 if gmax[2 * s] * 4.0 <= limit else 0)
                    db = (1 if gmax[2 * s + 1] * 2.0 <= limit else 0) + (1 if gmax[2 * s + 1] * 4.0 <= limit else 0)
                    e2 = min(1, min(da, db))
                    gsc[2 * s] = s1 * _HALVES[e2 + min(1, da - e2)]
                    gsc[2 * s + 1] = s1 * _HALVES[e2 + min(1, db - e2)]
                for k in range(k0, min(k0 + 64, length)):
                    sc = gsc[(k - k0) >> 2]
                    y = float(x[r, k]) / sc
                    clips += abs(y) > 1.75
                    uu = u[blk, k - k0] if kind != 0 else 0.0
                    out[r, k] = _round(y, 1, 1.75, kind, delta, uu) * sc
        return clips

    @njit(cache=True)
    def rht_rows(x, signs, k):
        """In place: every k-row slice of ``x`` (n x c, n a multiple of k) becomes
        ``H @ diag(signs[slice]) @ slice`` via a row-wise butterfly."""
        n, c = x.shape
        norm = 1.0 / math.sqrt(k)
        for s0 in range(0, n, k):
            srow = signs[(s0 // k) % signs.shape[0]]
            for i in range(k):
                f = srow[i]
                for j in range(c):
                    x[s0 + i, j] *= f
            h = 1
            while h < k:
                for b in range(s0, s0 + k, 2 * h):
                    for i in range(b, b + h):
                        for j in range(c):
                            a = x[i, j]
                            d = x[i + h, j]
                            x[i, j] = a + d
                            x[i + h, j] = a - d
                h *= 2
            for i in range(s0, s0 + k):
                for j in range(c):
                    x[i, j] *= norm


def available() -> bool:
    return njit is not None
