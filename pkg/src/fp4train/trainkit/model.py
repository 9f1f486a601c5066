"""Tiny pre-norm decoder-only transformer with a hand-written backward pass.

Blocks are ``h += proj(attn(rmsnorm(h)))`` then ``h += ffn(rmsnorm(h))`` where
the FFN is either ``fc2(gelu(fc1(.)))`` or a :class:`MoELayer`. Every linear
projection inside a block goes through :class:`QLinearLayer`; embeddings,
norms, the router and the output head stay in full precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..layers import MoELayer, QLinearLayer, QLinearPolicy, gelu, gelu_grad

__all__ = ["ModelConfig", "TinyTransformer"]

RMS_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "dense-tiny"  # or "moe-tiny"
    layers: int = 2
    d_model: int = 128
    heads: int = 4
    ffn_mult: int = 4
    n_experts: int = 4
    top_k: int = 1
    seq_len: int = 256
    vocab: int = 256
    moe_aux_coef: float = 0.0

    def __post_init__(self):
        if self.kind not in ("dense-tiny", "moe-tiny"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        for name in ("layers", "d_model", "heads", "ffn_mult", "seq_len", "vocab", "n_experts", "top_k"):
            if getattr(self, name) <= 0:
                raise ValueError(f"model.{name} must be positive")
        if self.d_model % self.heads:
            raise ValueError("model.d_model must be divisible by model.heads")
        if self.top_k > self.n_experts:
            raise ValueError("model.top_k must not exceed model.n_experts")

    @property
    def is_moe(self) -> bool:
        return self.kind == "moe-tiny"

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_mult * self.d_model


def _rmsnorm(x, g):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x * r * g, r


def _rmsnorm_backward(dy, x, r, g):
    s = dy * g
    dx = r * s - x * (r ** 3) * np.mean(s * x, axis=-1, keepdims=True)
    dg = np.sum(dy * x * r, axis=tuple(range(dy.ndim - 1)))
    return dx, dg


class TinyTransformer:
    """Parameters live in ``self.params`` (name -> array); ``loss_and_grads``
    returns gradients under the same names."""

    def __init__(self, cfg: ModelConfig, policy: QLinearPolicy | None = None, seed: int = 0,
                 dtype=np.float32):
        self.cfg = cfg
        self.policy = policy or QLinearPolicy.full_precision()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        d, f, L = cfg.d_model, cfg.ffn_hidden, cfg.layers

        def normal(shape, std=0.02):
            return (rng.standard_normal(shape) * std).astype(self.dtype)

        p = {"tok_emb": normal((cfg.vocab, d)), "pos_emb": normal((cfg.seq_len, d), 0.01)}
        resid_std = 0.02 / np.sqrt(2 * L)
        for l in range(L):
            p[f"l{l}.ln1"] = np.ones(d, self.dtype)
            p[f"l{l}.qkv"] = normal((3 * d, d))
            p[f"l{l}.proj"] = normal((d, d), resid_std)
            p[f"l{l}.ln2"] = np.ones(d, self.dtype)
            if cfg.is_moe:
                p[f"l{l}.router"] = normal((cfg.n_experts, d))
                for e in range(cfg.n_experts):
                    p[f"l{l}.e{e}.up"] = normal((f, d))
                    p[f"l{l}.e{e}.down"] = normal((d, f), resid_std)
            else:
                p[f"l{l}.fc1"] = normal((f, d))
                p[f"l{l}.fc2"] = normal((d, f), resid_std)
        p["ln_f"] = np.ones(d, self.dtype)
        p["head"] = normal((cfg.vocab, d))
        self.params = p

        lid = iter(range(1 << 20))
        self.linears: dict[str, QLinearLayer] = {}
        self.moes: list[MoELayer | None] = []
        for l in range(L):
            names = [f"l{l}.qkv", f"l{l}.proj"]
            names += ([f"l{l}.e{e}.{w}" for e in range(cfg.n_experts) for w in ("up", "down")]
                      if cfg.is_moe else [f"l{l}.fc1", f"l{l}.fc2"])
            for name in names:
                self.linears[name] = QLinearLayer(p[name], self.policy, next(lid), seed)
            if cfg.is_moe:
                experts = [(self.linears[f"l{l}.e{e}.up"], self.linears[f"l{l}.e{e}.down"])
                           for e in range(cfg.n_experts)]
                self.moes.append(MoELayer(experts, p[f"l{l}.router"], cfg.top_k, cfg.moe_aux_coef))
            else:
                self.moes.append(None)

    def set_step(self, step: int) -> None:
        for layer in self.linears.values():
            layer.step = step

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # ── forward / backward ───────────────────────────────────────

    def _attention(self, qkv, B, T):
        H, d = self.cfg.heads, self.cfg.d_model
        hd = d // H
        q, k, v = (qkv.reshape(B, T, 3, H, hd).transpose(2, 0, 3, 1, 4))
        scale = 1.0 / np.sqrt(hd)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s = s + self._mask(T)
        s = s - s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=-1, keepdims=True)
        o = (a @ v).transpose(0, 2, 1, 3).reshape(B * T, d)
        return o, (q, k, v, a, scale)

    def _attention_backward(self, do, cache, B, T):
        q, k, v, a, scale = cache
        H, d = self.cfg.heads, self.cfg.d_model
        do = do.reshape(B, T, H, d // H).transpose(0, 2, 1, 3)
        dv = a.transpose(0, 1, 3, 2) @ do
        da = do @ v.transpose(0, 1, 3, 2)
        ds = a * (da - np.sum(da * a, axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4)
        return dqkv.reshape(B * T, 3 * d)

    def _mask(self, T):
        cached = getattr(self, "_mask_cache", None)
        if cached is None or cached.shape[-1] != T:
            m = np.triu(np.full((T, T), -np.inf, dtype=self.dtype), k=1)
            self._mask_cache = cached = m
        return cached

    def loss(self, tokens: np.ndarray, targets: np.ndarray) -> float:
        return self.loss_and_grads(tokens, targets, grads=False)[0]

    def loss_and_grads(self, tokens: np.ndarray, targets: np.ndarray, grads: bool = True):
        """Mean next-token cross-entropy (plus any MoE balance loss) and its gradients."""
        cfg, p = self.cfg, self.params
        B, T = tokens.shape
        if T > cfg.seq_len:
            raise ValueError(f"sequence length {T} exceeds model.seq_len {cfg.seq_len}")
        d = cfg.d_model
        h = (p["tok_emb"][tokens] + p["pos_emb"][:T]).reshape(B * T, d)
        caches = []
        aux = 0.0
        for l in range(cfg.layers):
            c = {"h_in": h}
            a, c["r1"] = _rmsnorm(h, p[f"l{l}.ln1"])
            qkv = self.linears[f"l{l}.qkv"].forward(a)
            o, c["att"] = self._attention(qkv, B, T)
            h = h + self.linears[f"l{l}.proj"].forward(o)
            c["h_mid"] = h
            b, c["r2"] = _rmsnorm(h, p[f"l{l}.ln2"])
            if cfg.is_moe:
                y, c["route"] = self.moes[l].forward(b)
                aux += c["route"].aux_loss
            else:
                u = self.linears[f"l{l}.fc1"].forward(b)
                c["u"] = u
                y = self.linears[f"l{l}.fc2"].forward(gelu(u))
            h = h + y
            caches.append(c)
        hf, rf = _rmsnorm(h, p["ln_f"])
        logits = (hf @ p["head"].T).astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(logits).sum(axis=1))
        flat_t = targets.reshape(-1)
        ce = float(np.mean(lse - logits[np.arange(B * T), flat_t]))
        loss = ce + aux
        if not grads:
            for layer in self.linears.values():
                layer._saved = None
            return loss, None

        g: dict[str, np.ndarray] = {}
        dlogits = np.exp(logits - lse[:, None])
        dlogits[np.arange(B * T), flat_t] -= 1.0
        dlogits = (dlogits / (B * T)).astype(self.dtype)
        g["head"] = dlogits.T @ hf
        dh, g["ln_f"] = _rmsnorm_backward(dlogits @ p["head"], h, rf, p["ln_f"])
        for l in reversed(range(cfg.layers)):
            c = caches[l]
            if cfg.is_moe:
                db, dWs, g[f"l{l}.router"] = self.moes[l].backward(dh, c["route"])
                for e, (dWu, dWd) in enumerate(dWs):
                    g[f"l{l}.e{e}.up"], g[f"l{l}.e{e}.down"] = dWu, dWd
            else:
                dz, g[f"l{l}.fc2"] = self.linears[f"l{l}.fc2"].backward(dh)
                db, g[f"l{l}.fc1"] = self.linears[f"l{l}.fc1"].backward(dz * gelu_grad(c["u"]))
            b_in = c["h_mid"]
            dx, g[f"l{l}.ln2"] = _rmsnorm_backward(db, b_in, c["r2"], p[f"l{l}.ln2"])
            dh = dh + dx
            do, g[f"l{l}.proj"] = self.linears[f"l{l}.proj"].backward(dh)
            dqkv = self._attention_backward(do, c["att"], B, T)
            da, g[f"l{l}.qkv"] = self.linears[f"l{l}.qkv"].backward(dqkv)
            dx, g[f"l{l}.ln1"] = _rmsnorm_backward(da, c["h_in"], c["r1"], p[f"l{l}.ln1"])
            dh = dh + dx
        dh = dh.reshape(B, T, d)
        g["pos_emb"] = np.zeros_like(p["pos_emb"])
        g["pos_emb"][:T] = dh.sum(axis=0)
        g["tok_emb"] = np.zeros_like(p["tok_emb"])
        np.add.at(g["tok_emb"], tokens.reshape(-1), dh.reshape(B * T, d))
        g = {k: v.astype(self.dtype, copy=False) for k, v in g.items()}
        return loss, g
