"""Bit-exact codecs for the MXFP4 and HiFloat4 element, scale and block layouts.

Element formats
    E2M1  (MXFP4): sign | 2 exponent bits (bias 1) | 1 mantissa bit
    S1P2  (HiF4):  sign | 1 integer bit | 2 fraction bits

Scale formats
    E8M0 (MXFP4): bare exponent, value 2**(code - 127). Code 0xFF saturates to 2**127.
    E6M2 (HiF4): 6 exponent bits (bias 48) in the high bits, 2 mantissa bits in the
    low bits, value 2**(E - 48) * (1 + M/4).

Packed blocks (little-endian throughout)
    MXFP4, 17 bytes: scale code, then 16 bytes of elements, element 2i in the low
    nibble and element 2i+1 in the high nibble of byte i.
    HiF4, 36 bytes: scale1 code, e2 byte (bit s = e2[s]), e3 as a little-endian
    uint16 (bit g = e3[g]), then 32 bytes of elements packed as for MXFP4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import MalformedInputError, check_scheme

__all__ = [
    "E2M1_VALUES",
    "S1P2_VALUES",
    "E2M1_MAX",
    "S1P2_MAX",
    "E6M2_VALUES",
    "MX_BLOCK",
    "HIF_BLOCK",
    "HIF_GROUP",
    "BLOCK_BYTES",
    "MxBlock",
    "HifBlock",
    "decode_e2m1",
    "decode_s1p2",
    "decode_e8m0",
    "decode_e6m2",
    "encode_e6m2",
    "pack_block",
    "unpack_block",
    "pack_mx_arrays",
    "unpack_mx_arrays",
    "pack_hif_arrays",
    "unpack_hif_arrays",
    "bits_per_value",
]

MX_BLOCK = 32
HIF_BLOCK = 64
HIF_GROUP = 4  # elements per level-3 micro-exponent
HIF_SUBSETS = 8
HIF_GROUPS = 16
BLOCK_BYTES = {"mxfp4": 17, "hif4": 36}
E8M0_BIAS = 127
E6M2_BIAS = 48
HIF_ONE_CODE = E6M2_BIAS << 2  # E6M2 code decoding to exactly 1.0


def _e2m1_magnitude(bits: int) -> float:
    e, m = (bits >> 1) & 0b11, bits & 1
    if e == 0:
        return 0.5 * m
    return 2.0 ** (e - 1) * (1.0 + 0.5 * m)


# Magnitude tables indexed by the 3 low code bits; both are ascending.
E2M1_VALUES = np.array([_e2m1_magnitude(k) for k in range(8)])
S1P2_VALUES = np.arange(8) / 4.0
E2M1_MAX = float(E2M1_VALUES[-1])
S1P2_MAX = float(S1P2_VALUES[-1])

# Signed 16-entry decode tables.
_E2M1_LUT = np.concatenate([E2M1_VALUES, -E2M1_VALUES])
_S1P2_LUT = np.concatenate([S1P2_VALUES, -S1P2_VALUES])
_E8M0_LUT = np.ldexp(1.0, np.minimum(np.arange(256), 254) - E8M0_BIAS)
E6M2_VALUES = np.ldexp(1.0 + (np.arange(256) & 0b11) / 4.0, (np.arange(256) >> 2) - E6M2_BIAS)


def decode_e2m1(code) -> np.ndarray | float:
    """Decode one or many E2M1 codes (low 4 bits used)."""
    out = _E2M1_LUT[np.asarray(code, dtype=np.int64) & 0xF]
    return float(out) if out.ndim == 0 else out


def decode_s1p2(code) -> np.ndarray | float:
    out = _S1P2_LUT[np.asarray(code, dtype=np.int64) & 0xF]
    return float(out) if out.ndim == 0 else out


def decode_e8m0(code) -> np.ndarray | float:
    out = _E8M0_LUT[np.asarray(code, dtype=np.int64) & 0xFF]
    return float(out) if out.ndim == 0 else out


def decode_e6m2(code) -> np.ndarray | float:
    out = E6M2_VALUES[np.asarray(code, dtype=np.int64) & 0xFF]
    return float(out) if out.ndim == 0 else out


def encode_e6m2(exponent: int, mantissa: int) -> int:
    if not (0 <= exponent < 64 and 0 <= mantissa < 4):
        raise ValueError(f"E6M2 fields out of range: E={exponent}, M={mantissa}")
    return (exponent << 2) | mantissa


# ── block types ──────────────────────────────────────────────────


@dataclass(frozen=True)
class MxBlock:
    """One MXFP4 block: an E8M0 scale code and 32 E2M1 element codes."""

    scale: int
    elems: tuple[int, ...]

    def __post_init__(self):
        if len(self.elems) != MX_BLOCK:
            raise ValueError(f"MxBlock needs {MX_BLOCK} elements, got {len(self.elems)}")
        if not 0 <= self.scale <= 0xFF or any(not 0 <= c <= 0xF for c in self.elems):
            raise ValueError("MxBlock field out of range")

    def decode(self) -> np.ndarray:
        return decode_e8m0(self.scale) * _E2M1_LUT[np.array(self.elems)]


@dataclass(frozen=True)
class HifBlock:
    """One HiF4 block: E6M2 base scale, 8 level-2 and 16 level-3 micro-exponent
    bits, and 64 S1P2 element codes. A set micro-exponent bit halves the scale of
    the elements it governs."""

    scale1: int
    e2: tuple[int, ...]
    e3: tuple[int, ...]
    elems: tuple[int, ...]

    def __post_init__(self):
        if (len(self.e2), len(self.e3), len(self.elems)) != (HIF_SUBSETS, HIF_GROUPS, HIF_BLOCK):
            raise ValueError("HifBlock field lengths must be (8, 16, 64)")
        if not 0 <= self.scale1 <= 0xFF:
            raise ValueError("scale1 out of range")
        if any(b not in (0, 1) for b in self.e2 + self.e3):
            raise ValueError("micro-exponents must be 0 or 1")
        if any(not 0 <= c <= 0xF for c in self.elems):
            raise ValueError("element code out of range")

    def group_scales(self) -> np.ndarray:
        """Effective scale of each of the 16 four-element groups."""
        shift = np.repeat(np.array(self.e2), 2) + np.array(self.e3)
        return np.ldexp(decode_e6m2(self.scale1), -shift)

    def decode(self) -> np.ndarray:
        return _S1P2_LUT[np.array(self.elems)] * np.repeat(self.group_scales(), HIF_GROUP)


# ── array-level packing (used by QTensor and the .qtz format) ─────


def _pack_nibbles(codes: np.ndarray) -> np.ndarray:
    codes = codes.astype(np.uint8)
    return (codes[:, 0::2] & 0xF) | ((codes[:, 1::2] & 0xF) << 4)


def _unpack_nibbles(packed: np.ndarray) -> np.ndarray:
    out = np.empty((packed.shape[0], packed.shape[1] * 2), dtype=np.uint8)
    out[:, 0::2] = packed & 0xF
    out[:, 1::2] = packed >> 4
    return out


def _bits_to_int(bits: np.ndarray) -> np.ndarray:
    weights = np.left_shift(1, np.arange(bits.shape[1]), dtype=np.int64)
    return (bits.astype(np.int64) * weights).sum(axis=1)


def _int_to_bits(values: np.ndarray, width: int) -> np.ndarray:
    return ((values[:, None].astype(np.int64) >> np.arange(width)) & 1).astype(np.uint8)


def pack_mx_arrays(scales: np.ndarray, elems: np.ndarray) -> bytes:
    """Pack ``n`` MXFP4 blocks given scale codes ``(n,)`` and element codes ``(n, 32)``."""
    n = scales.shape[0]
    out = np.empty((n, BLOCK_BYTES["mxfp4"]), dtype=np.uint8)
    out[:, 0] = scales
    out[:, 1:] = _pack_nibbles(elems)
    return out.tobytes()


def unpack_mx_arrays(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    raw = _blocks_view(data, "mxfp4")
    return raw[:, 0].copy(), _unpack_nibbles(raw[:, 1:])


def pack_hif_arrays(scale1: np.ndarray, e2: np.ndarray, e3: np.ndarray, elems: np.ndarray) -> bytes:
    n = scale1.shape[0]
    out = np.empty((n, BLOCK_BYTES["hif4"]), dtype=np.uint8)
    out[:, 0] = scale1
    out[:, 1] = _bits_to_int(e2)
    e3int = _bits_to_int(e3)
    out[:, 2] = e3int & 0xFF
    out[:, 3] = e3int >> 8
    out[:, 4:] = _pack_nibbles(elems)
    return out.tobytes()


def unpack_hif_arrays(data: bytes) -> tuple[np.ndarray, ...]:
    raw = _blocks_view(data, "hif4")
    e3int = raw[:, 2].astype(np.int64) | (raw[:, 3].astype(np.int64) << 8)
    return (
        raw[:, 0].copy(),
        _int_to_bits(raw[:, 1], HIF_SUBSETS),
        _int_to_bits(e3int, HIF_GROUPS),
        _unpack_nibbles(raw[:, 4:]),
    )


def _blocks_view(data: bytes, scheme: str) -> np.ndarray:
    size = BLOCK_BYTES[scheme]
    if len(data) % size:
        raise MalformedInputError(f"{scheme} payload length {len(data)} is not a multiple of {size}")
    return np.frombuffer(data, dtype=np.uint8).reshape(-1, size)


# ── single-block API ─────────────────────────────────────────────


def pack_block(block: MxBlock | HifBlock) -> bytes:
    if isinstance(block, MxBlock):
        return pack_mx_arrays(np.array([block.scale]), np.array([block.elems]))
    if isinstance(block, HifBlock):
        return pack_hif_arrays(
            np.array([block.scale1]), np.array([block.e2]), np.array([block.e3]), np.array([block.elems])
        )
    raise TypeError(f"cannot pack {type(block).__name__}")


def unpack_block(data: bytes, scheme: str) -> MxBlock | HifBlock:
    scheme = check_scheme(scheme)
    if len(data) != BLOCK_BYTES[scheme]:
        raise MalformedInputError(
            f"{scheme} block must be exactly {BLOCK_BYTES[scheme]} bytes, got {len(data)}"
        )
    if scheme == "mxfp4":
        scales, elems = unpack_mx_arrays(data)
        return MxBlock(int(scales[0]), tuple(int(c) for c in elems[0]))
    s1, e2, e3, elems = unpack_hif_arrays(data)
    return HifBlock(
        int(s1[0]),
        tuple(int(b) for b in e2[0]),
        tuple(int(b) for b in e3[0]),
        tuple(int(c) for c in elems[0]),
    )


def bits_per_value(scheme: str, n_values: int | None = None) -> float:
    """Storage cost per value; for ``n_values`` the tail block counts in full."""
    scheme = check_scheme(scheme)
    bs = MX_BLOCK if scheme == "mxfp4" else HIF_BLOCK
    if n_values is None:
        n_values = bs
    n_blocks = -(-n_values // bs)
    return n_blocks * BLOCK_BYTES[scheme] * 8 / n_values
