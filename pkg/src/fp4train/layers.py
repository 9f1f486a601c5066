"""Quantized linear and mixture-of-experts layers with manual backward passes.

A linear layer runs three GEMMs per step:

    forward      Y  = A @ W.T      operands A, W    blocked along K
    input grad   dA = G @ W        operands G, W.T  blocked along N
    weight grad  dW = G.T @ A      operands G.T, A.T blocked along M (tokens)

Activations and weights always use nearest rounding. The gradient operand
uses stochastic rounding when ``use_sr_grads`` is set. With ``use_rht_dw``
both weight-gradient operands are rotated by the same random Hadamard
transform along the token axis before quantization; the rotation cancels in
the contraction, so it is never inverted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hadamard import RhtSpec, rht_apply
from .qgemm import GemmConfig, qgemm
from .quantize import NEAREST, STOCHASTIC, RoundingMode, ScalingPolicy
from ._validation import StateError, check_finite

__all__ = [
    "QLinearPolicy",
    "QLinearLayer",
    "MoELayer",
    "RoutingRecord",
    "gelu",
    "gelu_grad",
    "derive_seed",
]

FULL_PRECISION = "fp"


def derive_seed(*parts: int) -> int:
    """A 64-bit seed determined by ``parts`` (used to key every random draw)."""
    return int(np.random.SeedSequence([int(p) & ((1 << 63) - 1) for p in parts]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class QLinearPolicy:
    """Precision policy for the GEMMs of a linear layer.

    ``scheme`` is ``"mxfp4"``, ``"hif4"`` or ``"fp"`` (no quantization).
    """

    scheme: str = FULL_PRECISION
    use_sr_grads: bool = False
    use_rht_dw: bool = False
    use_tf: bool = False
    rht_block: int = 64
    sr_rounding: RoundingMode = STOCHASTIC

    def __post_init__(self):
        scheme = str(self.scheme).lower()
        if scheme in ("full", "fullprecision", "full-precision", "fp32", "none"):
            scheme = FULL_PRECISION
        if scheme not in ("mxfp4", "hif4", FULL_PRECISION):
            raise ValueError(f"unknown precision scheme {self.scheme!r}")
        object.__setattr__(self, "scheme", scheme)
        object.__setattr__(self, "sr_rounding", RoundingMode.parse(self.sr_rounding))
        if self.use_tf and scheme != "mxfp4":
            raise ValueError("truncation-free scaling applies to MXFP4 only")
        RhtSpec(self.rht_block)  # validates the block size

    @classmethod
    def full_precision(cls) -> QLinearPolicy:
        return cls(FULL_PRECISION)

    @classmethod
    def recommended(cls, scheme: str) -> QLinearPolicy:
        """HiF4: NR gradients + RHT. MXFP4: SR gradients + RHT + TF scaling."""
        if scheme == "hif4":
            return cls("hif4", use_sr_grads=False, use_rht_dw=True)
        if scheme == "mxfp4":
            return cls("mxfp4", use_sr_grads=True, use_rht_dw=True, use_tf=True)
        raise ValueError(f"no recommended policy for {scheme!r}")

    @classmethod
    def from_components(cls, scheme: str, components) -> QLinearPolicy:
        comps = {c.upper() for c in components}
        unknown = comps - {"SR", "RHT", "TF"}
        if unknown:
            raise ValueError(f"unknown stabilization components {sorted(unknown)}")
        return cls(scheme, use_sr_grads="SR" in comps, use_rht_dw="RHT" in comps, use_tf="TF" in comps)

    @property
    def quantized(self) -> bool:
        return self.scheme != FULL_PRECISION

    @property
    def components(self) -> tuple[str, ...]:
        flags = (("SR", self.use_sr_grads), ("RHT", self.use_rht_dw), ("TF", self.use_tf))
        return tuple(name for name, on in flags if on)

    @property
    def scaling(self) -> ScalingPolicy:
        return ScalingPolicy.TRUNCATION_FREE if self.use_tf else ScalingPolicy.STANDARD

    def gemm_config(self, grad_operand: bool) -> GemmConfig:
        a_round = self.sr_rounding if (grad_operand and self.use_sr_grads) else NEAREST
        return GemmConfig(self.scheme, a_round, NEAREST, self.scaling)


class QLinearLayer:
    """``Y = A @ W.T`` with full-precision master weights ``W`` (N x K).

    ``W`` is held by reference so an optimizer updating it in place is seen
    by the next forward. Random draws are keyed by ``(seed, layer_id, step,
    gemm)``; ``step`` advances after each backward and may be set by the
    caller to align layers to a global step.
    """

    def __init__(self, W: np.ndarray, policy: QLinearPolicy | None = None, layer_id: int = 0, seed: int = 0):
        self.W = W
        self.policy = policy or QLinearPolicy.full_precision()
        self.layer_id = layer_id
        self.seed = seed
        self.step = 0
        self._saved: np.ndarray | None = None

    def _seed(self, gemm: int) -> int:
        return derive_seed(self.seed, self.layer_id, self.step, gemm)

    def rht_spec(self) -> RhtSpec:
        """The transform shared by both weight-gradient operands this step."""
        return RhtSpec(self.policy.rht_block, self._seed(3))

    def forward(self, A: np.ndarray) -> np.ndarray:
        if A.ndim != 2 or A.shape[1] != self.W.shape[1]:
            raise ValueError(f"input of shape {A.shape} does not match weight {self.W.shape}")
        self._saved = A
        if not self.policy.quantized:
            return A @ self.W.T
        return qgemm(A, self.W, self.policy.gemm_config(False), self._seed(0)).astype(A.dtype, copy=False)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(dA, dW)`` for the upstream gradient ``grad`` (M x N)."""
        A = self._saved
        if A is None:
            raise StateError("backward called before forward")
        if grad.shape != (A.shape[0], self.W.shape[0]):
            raise ValueError(f"gradient of shape {grad.shape} does not match output {(A.shape[0], self.W.shape[0])}")
        check_finite(grad, "gradient")
        pol = self.policy
        G, X = grad, A
        if pol.use_rht_dw:
            spec = self.rht_spec()
            G = rht_apply(grad.astype(np.float64), spec, dim=0)
            X = rht_apply(A.astype(np.float64), spec, dim=0)
        if pol.quantized:
            dA = qgemm(grad, self.W.T, pol.gemm_config(True), self._seed(1))
            dW = qgemm(G.T, X.T, pol.gemm_config(True), self._seed(2))
        else:
            dA = grad @ self.W
            dW = G.T @ X
        self._saved = None
        self.step += 1
        return dA.astype(A.dtype, copy=False), dW.astype(self.W.dtype, copy=False)


# ── activation ───────────────────────────────────────────────────

_GELU_C = float(np.sqrt(2.0 / np.pi))


def _gelu_tanh(u, u2):
    # u * u * u is far faster than u ** 3 for float arrays
    return np.tanh(_GELU_C * (u + 0.044715 * u2 * u))


def gelu(u: np.ndarray) -> np.ndarray:
    """Tanh approximation of GELU."""
    return 0.5 * u * (1.0 + _gelu_tanh(u, u * u))


def gelu_grad(u: np.ndarray) -> np.ndarray:
    u2 = u * u
    t = _gelu_tanh(u, u2)
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u2)


# ── mixture of experts ───────────────────────────────────────────


@dataclass
class RoutingRecord:
    x: np.ndarray
    probs: np.ndarray
    topk: np.ndarray  # (M, k) expert indices
    gates: np.ndarray  # (M, k) renormalized weights
    dispatch: dict = field(default_factory=dict)  # expert -> (token idx, slot, pre-activation, output)
    aux_loss: float = 0.0


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class MoELayer:
    """Top-k routed experts, each ``down(gelu(up(x)))`` with quantized GEMMs.

    The router, softmax and gate combination run in full precision. Tokens are
    gathered per expert (no capacity limit, no dropping). An optional
    load-balancing loss ``aux_coef * E * sum_e f_e * P_e`` contributes to the
    router gradient.
    """

    def __init__(self, experts, router: np.ndarray, top_k: int = 1, aux_coef: float = 0.0):
        self.experts = list(experts)
        if not self.experts:
            raise ValueError("MoE layer needs at least one expert")
        if router.shape[0] != len(self.experts):
            raise ValueError("router must have one row per expert")
        if not 1 <= top_k <= len(self.experts):
            raise ValueError(f"top_k must be in [1, {len(self.experts)}], got {top_k}")
        self.router = router
        self.top_k = top_k
        self.aux_coef = aux_coef

    def set_step(self, step: int) -> None:
        for up, down in self.experts:
            up.step = down.step = step

    def route(self, x: np.ndarray):
        probs = _softmax((x @ self.router.T).astype(np.float64))
        topk = np.argsort(-probs, axis=1, kind="stable")[:, : self.top_k]
        sel = np.take_along_axis(probs, topk, axis=1)
        return probs, topk, sel / sel.sum(axis=1, keepdims=True)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, RoutingRecord]:
        probs, topk, gates = self.route(x)
        rec = RoutingRecord(x, probs, topk, gates)
        out = np.zeros((x.shape[0], self.experts[0][1].W.shape[0]), dtype=x.dtype)
        for e, (up, down) in enumerate(self.experts):
            idx, slot = np.nonzero(topk == e)
            if idx.size == 0:
                continue
            h = up.forward(x[idx])
            y = down.forward(gelu(h))
            out[idx] += (gates[idx, slot][:, None] * y).astype(x.dtype, copy=False)
            rec.dispatch[e] = (idx, slot, h, y)
        if self.aux_coef:
            f, P = self._balance_terms(rec)
            rec.aux_loss = float(self.aux_coef * len(self.experts) * np.sum(f * P))
        return out, rec

    def _balance_terms(self, rec: RoutingRecord):
        E, M = len(self.experts), rec.x.shape[0]
        f = np.bincount(rec.topk.ravel(), minlength=E) / (M * self.top_k)
        return f, rec.probs.mean(axis=0)

    def backward(self, grad: np.ndarray, rec: RoutingRecord):
        """Return ``(dx, [(dW_up, dW_down), ...], d_router)``; idle experts get zeros."""
        x = rec.x
        dx = np.zeros_like(x, dtype=np.float64)
        dgates = np.zeros_like(rec.gates)
        dWs = []
        for e, (up, down) in enumerate(self.experts):
            if e not in rec.dispatch:
                dWs.append((np.zeros_like(up.W), np.zeros_like(down.W)))
                continue
            idx, slot, h, y = rec.dispatch[e]
            g = grad[idx]
            dgates[idx, slot] = np.sum(g * y, axis=1)
            dz, dW_down = down.backward((g * rec.gates[idx, slot][:, None]).astype(x.dtype, copy=False))
            du, dW_up = up.backward((dz * gelu_grad(h)).astype(x.dtype, copy=False))
            np.add.at(dx, idx, du)
            dWs.append((dW_up, dW_down))
        # renormalized gates g_j = p_j / S over the selected experts
        sel = np.take_along_axis(rec.probs, rec.topk, axis=1)
        S = sel.sum(axis=1, keepdims=True)
        dsel = (dgates - np.sum(dgates * rec.gates, axis=1, keepdims=True)) / S
        dprobs = np.zeros_like(rec.probs)
        np.put_along_axis(dprobs, rec.topk, dsel, axis=1)
        if self.aux_coef:
            f, _ = self._balance_terms(rec)
            dprobs += self.aux_coef * len(self.experts) * f[None, :] / x.shape[0]
        dlogits = rec.probs * (dprobs - np.sum(dprobs * rec.probs, axis=1, keepdims=True))
        dx += dlogits @ self.router
        d_router = dlogits.T @ x
        return dx.astype(x.dtype, copy=False), dWs, d_router.astype(self.router.dtype, copy=False)
