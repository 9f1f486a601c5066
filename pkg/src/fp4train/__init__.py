"""MXFP4 and HiFloat4 block-scaled 4-bit formats, their quantizers, and a
small numpy training harness for FP4-vs-full-precision comparisons."""

from .formats import (E2M1_VALUES, S1P2_VALUES, HifBlock, MxBlock, bits_per_value, decode_e2m1,
                      decode_e6m2, decode_e8m0, decode_s1p2, pack_block, unpack_block)
from .hadamard import RhtSpec, fwht, hadamard_matrix, rht_apply, rht_apply_transpose
from .layers import MoELayer, QLinearLayer, QLinearPolicy
from .qgemm import GemmConfig, qgemm, qgemm_quantized
from .quantize import (NEAREST, STOCHASTIC, QTensor, RoundingMode, ScalingPolicy, dequantize_tensor,
                       fake_quantize, quantize_block_hif, quantize_block_mx, quantize_tensor,
                       stochastic_round)
from ._validation import InvalidValueError, MalformedInputError, StateError

__version__ = "0.1.0"

__all__ = [
    "E2M1_VALUES", "S1P2_VALUES", "MxBlock", "HifBlock", "bits_per_value", "decode_e2m1", "decode_s1p2",
    "decode_e8m0", "decode_e6m2", "pack_block", "unpack_block",
    "RoundingMode", "ScalingPolicy", "NEAREST", "STOCHASTIC", "QTensor", "quantize_block_mx",
    "quantize_block_hif", "stochastic_round", "quantize_tensor", "dequantize_tensor", "fake_quantize",
    "RhtSpec", "hadamard_matrix", "fwht", "rht_apply", "rht_apply_transpose",
    "GemmConfig", "qgemm", "qgemm_quantized",
    "QLinearPolicy", "QLinearLayer", "MoELayer",
    "MalformedInputError", "InvalidValueError", "StateError",
]
