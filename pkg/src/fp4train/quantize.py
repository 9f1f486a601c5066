"""Block-wise MXFP4 / HiF4 quantization with nearest and stochastic rounding.

Tensors are blocked along one axis (the GEMM contraction axis). Each block is
scaled, rounded to the element grid and stored as codes in a :class:`QTensor`.
All arithmetic is carried out in float64; for float32 inputs every decision
(tie detection, clipping) is exact.

Random draws come from a Philox stream keyed by ``(seed, tensor_id)``. Block
``b`` consumes the uniforms at positions ``[b*bs, (b+1)*bs)`` of that stream,
so the result does not depend on the order blocks are processed in
(see :func:`block_uniforms`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _kernels
from . import formats as F
from ._validation import check_finite, check_matrix, check_scheme

__all__ = [
    "RoundingMode",
    "NEAREST",
    "STOCHASTIC",
    "ScalingPolicy",
    "QTensor",
    "block_size",
    "block_uniforms",
    "quantize_mx_blocks",
    "quantize_hif_blocks",
    "quantize_block_mx",
    "quantize_block_hif",
    "stochastic_round",
    "quantize_tensor",
    "dequantize_tensor",
    "fake_quantize",
    "relative_rms_error",
]


@dataclass(frozen=True)
class RoundingMode:
    """How scaled values are mapped onto the element grid.

    ``kind`` is one of ``"nearest"`` (round half to even), ``"stochastic"``
    (pick a neighbour with probability proportional to proximity) or
    ``"additive"`` (nearest rounding after adding uniform noise of half-width
    ``delta`` grid steps).
    """

    kind: str = "nearest"
    delta: float = 0.5

    def __post_init__(self):
        if self.kind not in ("nearest", "stochastic", "additive"):
            raise ValueError(f"unknown rounding kind {self.kind!r}")
        if self.kind == "additive" and not 0.0 < self.delta <= 0.5:
            raise ValueError(f"additive rounding needs 0 < delta <= 0.5, got {self.delta}")

    @property
    def is_stochastic(self) -> bool:
        return self.kind != "nearest"

    @classmethod
    def parse(cls, text: str | RoundingMode) -> RoundingMode:
        """Parse ``nr``, ``sr`` or ``sr-additive[:delta]`` (long names also accepted)."""
        if isinstance(text, RoundingMode):
            return text
        name, _, arg = str(text).lower().partition(":")
        if name in ("nr", "nearest", "nearest-even"):
            return cls("nearest")
        if name in ("sr", "stochastic", "stochastic-interval"):
            return cls("stochastic")
        if name in ("sr-additive", "additive", "stochastic-additive"):
            return cls("additive", float(arg) if arg else 0.5)
        raise ValueError(f"unknown rounding mode {text!r}")

    def __str__(self) -> str:
        return {"nearest": "nr", "stochastic": "sr"}.get(self.kind, f"sr-additive:{self.delta:g}")


NEAREST = RoundingMode("nearest")
STOCHASTIC = RoundingMode("stochastic")


class ScalingPolicy(str, Enum):
    STANDARD = "standard"
    TRUNCATION_FREE = "tf"

    @classmethod
    def parse(cls, value) -> ScalingPolicy:
        if isinstance(value, cls):
            return value
        v = str(value).lower()
        if v in ("tf", "truncation-free", "truncation_free"):
            return cls.TRUNCATION_FREE
        if v in ("standard", "std"):
            return cls.STANDARD
        raise ValueError(f"unknown scaling policy {value!r}")


def block_size(scheme: str) -> int:
    return F.MX_BLOCK if check_scheme(scheme) == "mxfp4" else F.HIF_BLOCK


def _philox(seed: int, tensor_id: int) -> np.random.Philox:
    mask = (1 << 64) - 1
    return np.random.Philox(key=[int(seed) & mask, int(tensor_id) & mask])


def block_uniforms(seed: int, tensor_id: int, block: int, bs: int) -> np.ndarray:
    """The ``bs`` uniforms used by block ``block``, drawn without generating earlier blocks."""
    bitgen = _philox(seed, tensor_id)
    bitgen.advance(block * bs // 4)  # Philox4x64 yields four doubles per counter step
    return np.random.Generator(bitgen).random(bs)


def _stream_uniforms(seed: int, tensor_id: int, n_blocks: int, bs: int) -> np.ndarray:
    return np.random.Generator(_philox(seed, tensor_id)).random((n_blocks, bs))


# ── grid rounding ────────────────────────────────────────────────


def _e2m1_step(m: np.ndarray) -> np.ndarray:
    # Spacing of the E2M1 grid inside the binade containing m.
    return np.where(m < 2.0, 0.5, np.where(m < 4.0, 1.0, 2.0))


def _s1p2_step(m: np.ndarray) -> float:
    return 0.25


def _round_to_grid(y, step_fn, top, rounding: RoundingMode, u):
    """Round signed grid-unit values ``y`` onto a symmetric grid capped at ``top``.

    Returns (signed rounded values, sign bits as bool).
    """
    if rounding.kind == "additive":
        y = y + (2.0 * u - 1.0) * rounding.delta * step_fn(np.abs(y))
    neg = np.signbit(y)
    m = np.minimum(np.abs(y), 2.0 * top)  # keeps step lookup finite for clipped values
    step = step_fn(m)
    if rounding.kind == "stochastic":
        r = m / step
        lo = np.floor(r)
        q = (lo + (u < (r - lo))) * step
    else:
        q = np.rint(m / step) * step
    q = np.minimum(q, top)
    return np.where(neg, -q, q), neg


_E2M1_INDEX = np.zeros(13, dtype=np.uint8)
_E2M1_INDEX[(F.E2M1_VALUES * 2).astype(int)] = np.arange(8)


def _e2m1_codes(q: np.ndarray, neg: np.ndarray) -> np.ndarray:
    mag = _E2M1_INDEX[(np.abs(q) * 2).astype(np.int64)]
    return mag | (neg.astype(np.uint8) << 3)


def _s1p2_codes(q: np.ndarray, neg: np.ndarray) -> np.ndarray:
    mag = (np.abs(q) * 4).astype(np.uint8)
    return mag | (neg.astype(np.uint8) << 3)


# ── MXFP4 ────────────────────────────────────────────────────────


def _mx_exponent(amax: np.ndarray, scaling: ScalingPolicy) -> np.ndarray:
    """Block exponent e with scale 2**e.

    standard: largest e with 6 * 2**e <= amax (values above 6 * 2**e clip)
    tf:       smallest e with amax <= 6 * 2**e (nothing clips)
    """
    pos = amax > 0
    safe = np.where(pos, amax, 1.0)
    guess = np.log2(safe / F.E2M1_MAX)
    if scaling is ScalingPolicy.STANDARD:
        e = np.floor(guess).astype(np.int32)
        e = np.where(np.ldexp(F.E2M1_MAX, e + 1) <= safe, e + 1, e)
        e = np.where(np.ldexp(F.E2M1_MAX, e) > safe, e - 1, e)
    else:
        e = np.ceil(guess).astype(np.int32)
        e = np.where(np.ldexp(F.E2M1_MAX, e - 1) >= safe, e - 1, e)
        e = np.where(np.ldexp(F.E2M1_MAX, e) < safe, e + 1, e)
    e = np.where(pos, e, 0)
    return np.clip(e, -F.E8M0_BIAS, F.E8M0_BIAS).astype(np.int32)


def quantize_mx_blocks(v: np.ndarray, rounding: RoundingMode = NEAREST,
                       scaling: ScalingPolicy = ScalingPolicy.STANDARD,
                       u: np.ndarray | None = None, codes: bool = True):
    """Quantize ``(n, 32)`` float64 blocks to MXFP4.

    Returns ``(scale_codes, elem_codes, dequantized, clips)``; the code arrays
    are ``None`` when ``codes`` is false.
    """
    scaling = ScalingPolicy.parse(scaling)
    e = _mx_exponent(np.max(np.abs(v), axis=1), scaling)
    y = np.ldexp(v, -e[:, None])
    clips = int(np.count_nonzero(np.abs(y) > F.E2M1_MAX))
    q, neg = _round_to_grid(y, _e2m1_step, F.E2M1_MAX, rounding, u)
    deq = np.ldexp(q, e[:, None])
    if not codes:
        return None, None, deq, clips
    return (e + F.E8M0_BIAS).astype(np.uint8), _e2m1_codes(q, neg), deq, clips


# ── HiF4 ─────────────────────────────────────────────────────────

_HIF_LIMITS = F.S1P2_MAX * F.E6M2_VALUES  # largest magnitude each scale1 code can hold


def _hif_levels(v: np.ndarray):
    """Scale metadata for ``(n, 64)`` blocks: (scale1 codes, e2 (n, 8), e3 (n, 16), group scales)."""
    mag = np.abs(v)
    amax = mag.max(axis=1)
    code = np.minimum(np.searchsorted(_HIF_LIMITS, amax, side="left"), 255)
    code = np.where(amax > 0, code, F.HIF_ONE_CODE)
    s1 = F.E6M2_VALUES[code]
    limit = (F.S1P2_MAX * s1)[:, None]
    gmax = mag.reshape(-1, F.HIF_GROUPS, F.HIF_GROUP).max(axis=2)
    # desired downshift per group, capped at 2; zero groups take the cap
    d = (gmax * 2.0 <= limit).astype(np.int32) + (gmax * 4.0 <= limit)
    e2 = np.minimum(1, np.minimum(d[:, 0::2], d[:, 1::2]))
    e3 = np.minimum(1, d - np.repeat(e2, 2, axis=1))
    gscale = np.ldexp(s1[:, None], -(np.repeat(e2, 2, axis=1) + e3))
    return code.astype(np.uint8), e2.astype(np.uint8), e3.astype(np.uint8), gscale


def quantize_hif_blocks(v: np.ndarray, rounding: RoundingMode = NEAREST,
                        u: np.ndarray | None = None, codes: bool = True):
    """Quantize ``(n, 64)`` float64 blocks to HiF4.

    Returns ``(scale1, e2, e3, elem_codes, dequantized, clips)``.
    """
    s1, e2, e3, gscale = _hif_levels(v)
    escale = np.repeat(gscale, F.HIF_GROUP, axis=1)
    y = v / escale
    clips = int(np.count_nonzero(np.abs(y) > F.S1P2_MAX))
    q, neg = _round_to_grid(y, _s1p2_step, F.S1P2_MAX, rounding, u)
    deq = q * escale
    if not codes:
        return None, None, None, None, deq, clips
    return s1, e2, e3, _s1p2_codes(q, neg), deq, clips


# ── single blocks ────────────────────────────────────────────────


def _block_input(values, n: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.shape[0] != n:
        raise ValueError(f"expected {n} values, got {v.shape[0]}")
    return check_finite(v, "block").reshape(1, n)


def _block_noise(rounding, rng, n):
    if not rounding.is_stochastic:
        return None
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return rng.random((1, n))


def quantize_block_mx(values, rounding: RoundingMode = NEAREST,
                      scaling: ScalingPolicy | str = ScalingPolicy.STANDARD, rng=None) -> F.MxBlock:
    v = _block_input(values, F.MX_BLOCK)
    rounding = RoundingMode.parse(rounding)
    sc, el, _, _ = quantize_mx_blocks(v, rounding, ScalingPolicy.parse(scaling),
                                      _block_noise(rounding, rng, F.MX_BLOCK))
    return F.MxBlock(int(sc[0]), tuple(int(c) for c in el[0]))


def quantize_block_hif(values, rounding: RoundingMode = NEAREST, rng=None) -> F.HifBlock:
    v = _block_input(values, F.HIF_BLOCK)
    rounding = RoundingMode.parse(rounding)
    s1, e2, e3, el, _, _ = quantize_hif_blocks(v, rounding, _block_noise(rounding, rng, F.HIF_BLOCK))
    return F.HifBlock(int(s1[0]), tuple(int(b) for b in e2[0]),
                      tuple(int(b) for b in e3[0]), tuple(int(c) for c in el[0]))


def stochastic_round(x: float, grid, mode: RoundingMode | str = STOCHASTIC, rng=None) -> float:
    """Round a scalar onto an arbitrary sorted grid.

    Ties under nearest rounding go to the neighbour with even grid index, which
    for the E2M1 and S1P2 magnitude grids is the even-mantissa code. Values
    outside the grid saturate to its ends.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.size == 0:
        raise ValueError("grid must be non-empty")
    if np.any(np.diff(g) <= 0):
        raise ValueError("grid must be strictly increasing")
    mode = RoundingMode.parse(mode)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = float(x)

    def neighbours(val):
        if val <= g[0]:
            return 0, 0
        if val >= g[-1]:
            return g.size - 1, g.size - 1
        hi = int(np.searchsorted(g, val, side="left"))
        if g[hi] == val:
            return hi, hi
        return hi - 1, hi

    def nearest(val):
        lo, hi = neighbours(val)
        if lo == hi:
            return g[lo]
        dl, dh = val - g[lo], g[hi] - val
        if dl == dh:
            return g[lo] if lo % 2 == 0 else g[hi]
        return g[lo] if dl < dh else g[hi]

    if mode.kind == "nearest":
        return float(nearest(x))
    lo, hi = neighbours(x)
    if mode.kind == "stochastic":
        if lo == hi:
            return float(g[lo])
        p_up = (x - g[lo]) / (g[hi] - g[lo])
        return float(g[hi] if rng.random() < p_up else g[lo])
    if lo == hi:
        # on a grid point: use the interval above it (or below at the top end)
        lo, hi = (lo, lo + 1) if lo + 1 < g.size else (lo - 1, lo)
        if g.size == 1:
            return float(g[0])
    step = g[hi] - g[lo]
    return float(nearest(x + (2.0 * rng.random() - 1.0) * mode.delta * step))


# ── tensors ──────────────────────────────────────────────────────


@dataclass
class QTensor:
    """A matrix quantized block-wise along one axis.

    ``axis="row"`` splits each row into blocks (blocking along columns);
    ``axis="col"`` splits each column. Blocks are stored line by line.
    """

    rows: int
    cols: int
    scheme: str
    axis: str
    rounding: RoundingMode
    scaling: ScalingPolicy
    scales: np.ndarray
    elems: np.ndarray
    e2: np.ndarray | None = None
    e3: np.ndarray | None = None
    seed: int = 0
    tensor_id: int = 0
    clips: int = field(default=0, compare=False)

    @property
    def block_size(self) -> int:
        return block_size(self.scheme)

    @property
    def length(self) -> int:
        """Unpadded length of each blocked line."""
        return self.cols if self.axis == "row" else self.rows

    @property
    def lines(self) -> int:
        return self.rows if self.axis == "row" else self.cols

    @property
    def blocks_per_line(self) -> int:
        return -(-self.length // self.block_size)

    @property
    def pad(self) -> int:
        return self.blocks_per_line * self.block_size - self.length

    @property
    def n_blocks(self) -> int:
        return self.scales.shape[0]

    def block(self, i: int) -> F.MxBlock | F.HifBlock:
        if self.scheme == "mxfp4":
            return F.MxBlock(int(self.scales[i]), tuple(int(c) for c in self.elems[i]))
        return F.HifBlock(int(self.scales[i]), tuple(int(b) for b in self.e2[i]),
                          tuple(int(b) for b in self.e3[i]), tuple(int(c) for c in self.elems[i]))

    def blocks(self) -> list:
        return [self.block(i) for i in range(self.n_blocks)]

    def decoded_blocks(self) -> np.ndarray:
        """Dequantized values, shape ``(n_blocks, block_size)``, padding included."""
        if self.scheme == "mxfp4":
            return F.decode_e8m0(self.scales)[:, None] * F.decode_e2m1(self.elems)
        shift = np.repeat(self.e2.astype(np.int32), 2, axis=1) + self.e3
        gscale = np.ldexp(F.decode_e6m2(self.scales)[:, None], -shift)
        return F.decode_s1p2(self.elems) * np.repeat(gscale, F.HIF_GROUP, axis=1)

    def dequantize(self, dtype=np.float64) -> np.ndarray:
        return _from_blocks(self.decoded_blocks(), self.lines, self.length, self.axis).astype(dtype, copy=False)

    def payload(self) -> bytes:
        if self.scheme == "mxfp4":
            return F.pack_mx_arrays(self.scales, self.elems)
        return F.pack_hif_arrays(self.scales, self.e2, self.e3, self.elems)

    def nbytes(self) -> int:
        return self.n_blocks * F.BLOCK_BYTES[self.scheme]

    def bits_per_value(self) -> float:
        return self.nbytes() * 8 / (self.rows * self.cols)

    def __eq__(self, other):
        if not isinstance(other, QTensor):
            return NotImplemented
        same = ((self.rows, self.cols, self.scheme, self.axis, self.rounding, self.scaling)
                == (other.rows, other.cols, other.scheme, other.axis, other.rounding, other.scaling))
        return same and self.payload() == other.payload()


def _to_blocks(t: np.ndarray, axis: str, bs: int) -> tuple[np.ndarray, int, int]:
    m = t if axis == "row" else t.T
    lines, length = m.shape
    nb = -(-length // bs)
    if nb * bs != length:
        padded = np.zeros((lines, nb * bs), dtype=np.float64)
        padded[:, :length] = m
        m = padded
    return np.ascontiguousarray(m, dtype=np.float64).reshape(lines * nb, bs), lines, length


def _from_blocks(b: np.ndarray, lines: int, length: int, axis: str) -> np.ndarray:
    m = b.reshape(lines, -1)[:, :length]
    return m if axis == "row" else m.T


def _check_axis(axis: str) -> str:
    if axis not in ("row", "col"):
        raise ValueError(f"axis must be 'row' or 'col', got {axis!r}")
    return axis


def _check_scaling(scheme: str, scaling: ScalingPolicy) -> None:
    if scheme == "hif4" and scaling is ScalingPolicy.TRUNCATION_FREE:
        raise ValueError("truncation-free scaling applies to MXFP4 only")


def _quantize_lines(t, scheme, axis, rounding, scaling, seed, tensor_id, codes):
    scheme = check_scheme(scheme)
    axis = _check_axis(axis)
    rounding = RoundingMode.parse(rounding)
    scaling = ScalingPolicy.parse(scaling)
    _check_scaling(scheme, scaling)
    t = check_matrix(t, "tensor")
    bs = block_size(scheme)
    blocks, lines, length = _to_blocks(t, axis, bs)
    u = _stream_uniforms(seed, tensor_id, blocks.shape[0], bs) if rounding.is_stochastic else None
    if scheme == "mxfp4":
        sc, el, deq, clips = quantize_mx_blocks(blocks, rounding, scaling, u, codes)
        e2 = e3 = None
    else:
        sc, e2, e3, el, deq, clips = quantize_hif_blocks(blocks, rounding, u, codes)
    return t, (scheme, axis, rounding, scaling), (sc, el, e2, e3), deq, clips, lines, length


def quantize_tensor(t, scheme: str = "hif4", axis: str = "row", rounding: RoundingMode | str = NEAREST,
                    scaling: ScalingPolicy | str = ScalingPolicy.STANDARD, seed: int = 0,
                    tensor_id: int = 0) -> QTensor:
    """Quantize a 2-D array block-wise along ``axis``; tail blocks are zero-padded."""
    t, meta, (sc, el, e2, e3), _, clips, _, _ = _quantize_lines(
        t, scheme, axis, rounding, scaling, seed, tensor_id, codes=True)
    scheme, axis, rounding, scaling = meta
    return QTensor(t.shape[0], t.shape[1], scheme, axis, rounding, scaling, sc, el, e2, e3,
                   seed=seed, tensor_id=tensor_id, clips=clips)


def dequantize_tensor(q: QTensor, dtype=np.float64) -> np.ndarray:
    return q.dequantize(dtype)


def fake_quantize(t, scheme: str = "hif4", axis: str = "row", rounding: RoundingMode | str = NEAREST,
                  scaling: ScalingPolicy | str = ScalingPolicy.STANDARD, seed: int = 0,
                  tensor_id: int = 0, return_clips: bool = False, backend: str = "auto"):
    """``dequantize_tensor(quantize_tensor(t, ...))`` without materializing codes.

    The result has the dtype of ``t`` when it is a float array (exact for
    float32, since every FP4 value times its scale fits in 24 bits).
    ``backend="numpy"`` forces the vectorized reference path; the default uses
    the compiled kernels when numba is importable.
    """
    arr = np.asarray(t)
    dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64
    if backend not in ("auto", "numpy", "numba"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend != "numpy" and _kernels.available():
        out, clips = _fake_quantize_compiled(arr, scheme, axis, rounding, scaling, seed, tensor_id, dtype)
    else:
        t, meta, _, deq, clips, lines, length = _quantize_lines(
            arr, scheme, axis, rounding, scaling, seed, tensor_id, codes=False)
        out = np.ascontiguousarray(_from_blocks(deq, lines, length, meta[1]), dtype=dtype)
    if arr.ndim == 1:
        out = out.reshape(-1)
    return (out, clips) if return_clips else out


_KIND = {"nearest": _kernels.KIND_NEAREST, "stochastic": _kernels.KIND_STOCHASTIC,
         "additive": _kernels.KIND_ADDITIVE}
_NO_NOISE = np.zeros((1, 1))


def _fake_quantize_compiled(arr, scheme, axis, rounding, scaling, seed, tensor_id, dtype):
    scheme = check_scheme(scheme)
    axis = _check_axis(axis)
    rounding = RoundingMode.parse(rounding)
    scaling = ScalingPolicy.parse(scaling)
    _check_scaling(scheme, scaling)
    x = check_matrix(arr, "tensor")
    view = x if axis == "row" else x.T
    out = np.empty(view.shape, dtype=dtype)
    bs = block_size(scheme)
    n_blocks = view.shape[0] * (-(-view.shape[1] // bs))
    u = _stream_uniforms(seed, tensor_id, n_blocks, bs) if rounding.is_stochastic else _NO_NOISE
    kind = _KIND[rounding.kind]
    if scheme == "mxfp4":
        clips = _kernels.mx_rows(view, out, kind, rounding.delta,
                                 scaling is ScalingPolicy.TRUNCATION_FREE, u)
    else:
        clips = _kernels.hif_rows(view, out, kind, rounding.delta, u, _HIF_LIMITS, F.E6M2_VALUES)
    return (out if axis == "row" else out.T), int(clips)


def relative_rms_error(reference: np.ndarray, approx: np.ndarray) -> float:
    ref = np.asarray(reference, dtype=np.float64)
    den = math.sqrt(float(np.mean(ref ** 2)))
    err = math.sqrt(float(np.mean((ref - np.asarray(approx, dtype=np.float64)) ** 2)))
    return err / den if den > 0 else err
