"""On-disk tensor formats. Everything is little-endian.

TSR1 (raw tensor)::

    magic   4 bytes  b"TSR1"
    ndim    uint32
    dims    ndim x uint32
    data    prod(dims) x float32, row-major

QTZ1 (quantized tensor), a 48-byte header then the packed blocks::

    magic      4 bytes  b"QTZ1"
    version    uint8    1
    scheme     uint8    0 = mxfp4, 1 = hif4
    axis       uint8    0 = row-blocked, 1 = col-blocked
    rounding   uint8    0 = nearest, 1 = stochastic, 2 = additive
    scaling    uint8    0 = standard, 1 = truncation-free
    reserved   3 bytes  zero
    delta      float64  additive-noise half-width (grid steps)
    seed       uint64
    tensor_id  uint64
    rows       uint32
    cols       uint32
    pad        uint32   zeros appended to each blocked line
    payload    n_blocks x 17 (mxfp4) or 36 (hif4) bytes, line by line

``n_blocks = lines * ceil(length / block)`` follows from the header, so a
file whose size disagrees is rejected.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import formats as F
from ._validation import MalformedInputError
from .quantize import QTensor, RoundingMode, ScalingPolicy, block_size

__all__ = ["read_tsr", "write_tsr", "encode_tsr", "decode_tsr", "read_qtz", "write_qtz", "encode_qtz",
           "decode_qtz", "QTZ_HEADER"]

TSR_MAGIC = b"TSR1"
QTZ_MAGIC = b"QTZ1"
QTZ_VERSION = 1
QTZ_HEADER = struct.Struct("<4sBBBBB3xdQQIII")

_SCHEMES = ("mxfp4", "hif4")
_AXES = ("row", "col")
_KINDS = ("nearest", "stochastic", "additive")
_SCALINGS = (ScalingPolicy.STANDARD, ScalingPolicy.TRUNCATION_FREE)


def encode_tsr(t: np.ndarray) -> bytes:
    a = np.ascontiguousarray(t, dtype="<f4")
    head = TSR_MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return head + a.tobytes()


def decode_tsr(data: bytes) -> np.ndarray:
    if len(data) < 8 or data[:4] != TSR_MAGIC:
        raise MalformedInputError("not a TSR1 tensor file (bad magic)")
    (ndim,) = struct.unpack_from("<I", data, 4)
    if ndim > 32:
        raise MalformedInputError(f"implausible tensor rank {ndim}")
    end = 8 + 4 * ndim
    if len(data) < end:
        raise MalformedInputError("truncated TSR1 header")
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    n = int(np.prod(dims, dtype=np.int64))
    if len(data) != end + 4 * n:
        raise MalformedInputError(f"TSR1 payload is {len(data) - end} bytes, expected {4 * n} for shape {dims}")
    return np.frombuffer(data, dtype="<f4", offset=end).reshape(dims).astype(np.float32)


def write_tsr(path, t: np.ndarray) -> None:
    Path(path).write_bytes(encode_tsr(t))


def read_tsr(path) -> np.ndarray:
    return decode_tsr(Path(path).read_bytes())


def encode_qtz(q: QTensor) -> bytes:
    head = QTZ_HEADER.pack(
        QTZ_MAGIC, QTZ_VERSION, _SCHEMES.index(q.scheme), _AXES.index(q.axis),
        _KINDS.index(q.rounding.kind), _SCALINGS.index(q.scaling), float(q.rounding.delta),
        int(q.seed) & ((1 << 64) - 1), int(q.tensor_id) & ((1 << 64) - 1), q.rows, q.cols, q.pad,
    )
    return head + q.payload()


def _field(table, index, what):
    if index >= len(table):
        raise MalformedInputError(f"unknown {what} code {index}")
    return table[index]


def decode_qtz(data: bytes) -> QTensor:
    if len(data) < QTZ_HEADER.size:
        raise MalformedInputError("truncated QTZ1 header")
    magic, version, scheme, axis, kind, scaling, delta, seed, tid, rows, cols, pad = \
        QTZ_HEADER.unpack_from(data)
    if magic != QTZ_MAGIC:
        raise MalformedInputError("not a QTZ1 file (bad magic)")
    if version != QTZ_VERSION:
        raise MalformedInputError(f"unsupported QTZ1 version {version}")
    scheme = _field(_SCHEMES, scheme, "scheme")
    axis = _field(_AXES, axis, "axis")
    kind = _field(_KINDS, kind, "rounding")
    scaling = _field(_SCALINGS, scaling, "scaling")
    if scheme == "hif4" and scaling is ScalingPolicy.TRUNCATION_FREE:
        raise MalformedInputError("QTZ1 header pairs hif4 with truncation-free scaling")
    if rows == 0 or cols == 0:
        raise MalformedInputError("QTZ1 tensor has a zero dimension")
    try:
        rounding = RoundingMode(kind, delta) if kind == "additive" else RoundingMode(kind)
    except ValueError as exc:
        raise MalformedInputError(str(exc)) from None
    bs = block_size(scheme)
    lines, length = (rows, cols) if axis == "row" else (cols, rows)
    per_line = -(-length // bs)
    if pad != per_line * bs - length:
        raise MalformedInputError(f"header pad {pad} inconsistent with length {length}")
    body = data[QTZ_HEADER.size:]
    expect = lines * per_line * F.BLOCK_BYTES[scheme]
    if len(body) != expect:
        raise MalformedInputError(f"QTZ1 payload is {len(body)} bytes, header implies {expect}")
    if scheme == "mxfp4":
        scales, elems = F.unpack_mx_arrays(body)
        e2 = e3 = None
    else:
        scales, e2, e3, elems = F.unpack_hif_arrays(body)
    return QTensor(rows, cols, scheme, axis, rounding, scaling, scales, elems, e2, e3, seed=seed, tensor_id=tid)


def write_qtz(path, q: QTensor) -> None:
    Path(path).write_bytes(encode_qtz(q))


def read_qtz(path) -> QTensor:
    return decode_qtz(Path(path).read_bytes())
