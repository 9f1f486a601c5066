"""scikit-learn transformer wrappers, so FP4 fake-quantization and the
random Hadamard rotation can sit inside a ``Pipeline``.

Both transformers are stateless apart from validating the input width seen
in ``fit``; quantization is per-block, so ``fit`` learns nothing else.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .hadamard import RhtSpec, rht_apply, rht_apply_transpose
from .quantize import QTensor, RoundingMode, ScalingPolicy, fake_quantize, quantize_tensor
from ._validation import check_scheme

__all__ = ["BlockQuantizer", "RandomHadamardRotation"]


class BlockQuantizer(TransformerMixin, BaseEstimator):
    """Round-trip samples through MXFP4 or HiF4 blocks along the feature axis.

    Parameters
    ----------
    scheme : {"mxfp4", "hif4"}
    rounding : str, "nr", "sr" or "sr-additive[:delta]"
    scaling : {"standard", "tf"}; "tf" is MXFP4-only
    seed, tensor_id : keys for stochastic rounding

    After ``transform``, ``clips_`` holds the number of clipped elements.
    """

    def __init__(self, scheme="hif4", rounding="nr", scaling="standard", seed=0, tensor_id=0):
        self.scheme = scheme
        self.rounding = rounding
        self.scaling = scaling
        self.seed = seed
        self.tensor_id = tensor_id

    def _validate_params(self):
        scheme = check_scheme(self.scheme)
        rounding = RoundingMode.parse(self.rounding)
        scaling = ScalingPolicy.parse(self.scaling)
        if scheme == "hif4" and scaling is ScalingPolicy.TRUNCATION_FREE:
            raise ValueError("truncation-free scaling applies to MXFP4 only")
        return scheme, rounding, scaling

    def fit(self, X, y=None):
        self._validate_params()
        X = check_array(X, dtype=(np.float64, np.float32))
        self.n_features_in_ = X.shape[1]
        return self

    def _checked(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=(np.float64, np.float32))
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, but {type(self).__name__} was fitted "
                             f"with {self.n_features_in_}")
        return X

    def transform(self, X):
        X = self._checked(X)
        scheme, rounding, scaling = self._validate_params()
        out, self.clips_ = fake_quantize(X, scheme, "row", rounding, scaling, self.seed, self.tensor_id,
                                         return_clips=True)
        return out

    def quantize(self, X) -> QTensor:
        """The packed blocks behind :meth:`transform`."""
        X = self._checked(X)
        scheme, rounding, scaling = self._validate_params()
        return quantize_tensor(X, scheme, "row", rounding, scaling, self.seed, self.tensor_id)


class RandomHadamardRotation(TransformerMixin, BaseEstimator):
    """Per-sample ``H S`` rotation of each ``k``-wide feature slice.

    Widths that are not a multiple of ``k`` are zero-padded, so the output has
    ``ceil(n_features / k) * k`` columns; ``inverse_transform`` crops back.
    """

    def __init__(self, k=64, seed=0, per_slice=False):
        self.k = k
        self.seed = seed
        self.per_slice = per_slice

    def fit(self, X, y=None):
        X = check_array(X, dtype=(np.float64, np.float32))
        self.spec_ = RhtSpec(self.k, self.seed, self.per_slice)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        X = check_array(X, dtype=(np.float64, np.float32))
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return rht_apply(X, self.spec_, dim=1)

    def inverse_transform(self, X):
        check_is_fitted(self, "spec_")
        X = check_array(X, dtype=(np.float64, np.float32))
        return rht_apply_transpose(X, self.spec_, dim=1, length=self.n_features_in_)
