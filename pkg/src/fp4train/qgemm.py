"""Simulated FP4 GEMM.

``qgemm(A, B)`` computes ``Q(A) @ Q(B).T`` where both operands are quantized
block-wise along their shared contraction axis ``K``. Products accumulate in
float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quantize import (NEAREST, QTensor, RoundingMode, ScalingPolicy, block_size, fake_quantize,
                       quantize_tensor)
from ._validation import check_matrix, check_scheme

__all__ = ["GemmConfig", "qgemm", "qgemm_quantized", "quantize_operands", "operand_ids"]


@dataclass(frozen=True)
class GemmConfig:
    """Quantization settings for the two operands of one GEMM.

    ``accumulate="wide"`` dequantizes both operands and runs one float64
    matmul. ``"per-block"`` adds up the float64 products of each K-block in
    turn, the way a block dot-product datapath would.
    """

    scheme: str = "hif4"
    a_rounding: RoundingMode = NEAREST
    b_rounding: RoundingMode = NEAREST
    scaling: ScalingPolicy = ScalingPolicy.STANDARD
    accumulate: str = "wide"

    def __post_init__(self):
        object.__setattr__(self, "scheme", check_scheme(self.scheme))
        object.__setattr__(self, "a_rounding", RoundingMode.parse(self.a_rounding))
        object.__setattr__(self, "b_rounding", RoundingMode.parse(self.b_rounding))
        object.__setattr__(self, "scaling", ScalingPolicy.parse(self.scaling))
        if self.scheme == "hif4" and self.scaling is ScalingPolicy.TRUNCATION_FREE:
            raise ValueError("truncation-free scaling applies to MXFP4 only")
        if self.accumulate not in ("wide", "per-block"):
            raise ValueError(f"unknown accumulation mode {self.accumulate!r}")


def operand_ids(seed: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """(seed, tensor_id) pairs used for the A and B operands of a qgemm call."""
    return (seed, 0), (seed, 1)


def _check_pair(A, B):
    A = check_matrix(A, "A")
    B = check_matrix(B, "B")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"contraction mismatch: A is {A.shape}, B is {B.shape}")
    return A, B


def _per_block_product(a: np.ndarray, b: np.ndarray, bs: int) -> np.ndarray:
    K = a.shape[1]
    out = np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    for k0 in range(0, K, bs):
        out += a[:, k0:k0 + bs] @ b[:, k0:k0 + bs].T
    return out


def qgemm(A, B, cfg: GemmConfig = GemmConfig(), seed: int = 0) -> np.ndarray:
    """FP4 product of ``A`` (M x K) and ``B`` (N x K), returning M x N in float64."""
    A, B = _check_pair(A, B)
    (sa, ta), (sb, tb) = operand_ids(seed)
    qa = fake_quantize(A.astype(np.float64), cfg.scheme, "row", cfg.a_rounding, cfg.scaling, sa, ta)
    qb = fake_quantize(B.astype(np.float64), cfg.scheme, "row", cfg.b_rounding, cfg.scaling, sb, tb)
    if cfg.accumulate == "per-block":
        return _per_block_product(qa, qb, block_size(cfg.scheme))
    return qa @ qb.T


def qgemm_quantized(Aq: QTensor, Bq: QTensor, accumulate: str = "wide") -> np.ndarray:
    """Product of two already-quantized operands, each blocked along K (``axis="row"``)."""
    if Aq.scheme != Bq.scheme:
        raise ValueError(f"scheme mismatch: {Aq.scheme} vs {Bq.scheme}")
    if Aq.axis != "row" or Bq.axis != "row":
        raise ValueError("qgemm_quantized expects both operands blocked along K (axis='row')")
    if Aq.cols != Bq.cols:
        raise ValueError(f"contraction mismatch: {Aq.cols} vs {Bq.cols}")
    a = Aq.decoded_blocks().reshape(Aq.rows, -1)
    b = Bq.decoded_blocks().reshape(Bq.rows, -1)
    if accumulate == "per-block":
        return _per_block_product(a, b, Aq.block_size)
    return a @ b.T


def quantize_operands(A, B, cfg: GemmConfig, seed: int = 0) -> tuple[QTensor, QTensor]:
    """The QTensors ``qgemm(A, B, cfg, seed)`` multiplies."""
    A, B = _check_pair(A, B)
    (sa, ta), (sb, tb) = operand_ids(seed)
    return (quantize_tensor(A, cfg.scheme, "row", cfg.a_rounding, cfg.scaling, sa, ta),
            quantize_tensor(B, cfg.scheme, "row", cfg.b_rounding, cfg.scaling, sb, tb))
