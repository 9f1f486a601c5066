"""Central finite-difference checks shared by the layer and acceptance tests."""

import numpy as np

from fp4train.layers import MoELayer, QLinearLayer
from fp4train.trainkit.model import ModelConfig, TinyTransformer


def fd_rel_error(f, x, analytic, h, idx):
    """Norm-wise relative error between analytic and central differences at ``idx``."""
    num = []
    for i in idx:
        old = x.flat[i]
        x.flat[i] = old + h
        up = f()
        x.flat[i] = old - h
        dn = f()
        x.flat[i] = old
        num.append((up - dn) / (2 * h))
    num, ana = np.array(num), analytic.flat[np.asarray(list(idx))]
    return float(np.linalg.norm(num - ana) / max(np.linalg.norm(ana), 1e-300))


def _sample(rng, size, n):
    return rng.choice(size, min(n, size), replace=False)


def moe_fd_errors(n_experts=8, top_k=2, d=6, f=10, M=12, seed=0, h=1e-5):
    rng = np.random.default_rng(seed)
    experts = [(QLinearLayer(rng.standard_normal((f, d)) * 0.5), QLinearLayer(rng.standard_normal((d, f)) * 0.5))
               for _ in range(n_experts)]
    moe = MoELayer(experts, rng.standard_normal((n_experts, d)), top_k)
    x = rng.standard_normal((M, d))
    R = rng.standard_normal((M, d))

    def loss():
        return float(np.sum(moe.forward(x)[0] * R))

    out, rec = moe.forward(x)
    dx, dWs, dr = moe.backward(R, rec)
    errs = {"x": fd_rel_error(loss, x, dx, h, range(x.size)),
            "router": fd_rel_error(loss, moe.router, dr, h, range(moe.router.size))}
    for e in set(rec.topk.ravel().tolist()):
        up, down = experts[e]
        errs[f"e{e}.up"] = fd_rel_error(loss, up.W, dWs[e][0], h, range(up.W.size))
        errs[f"e{e}.down"] = fd_rel_error(loss, down.W, dWs[e][1], h, range(down.W.size))
    return errs


def model_fd_errors(kind, seed=0, h=1e-4, per_param=6):
    cfg = ModelConfig(kind=kind, layers=2, d_model=16, heads=2, ffn_mult=2, n_experts=8, top_k=2, seq_len=8)
    model = TinyTransformer(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    # larger-than-init weights so every path carries signal
    for k, v in model.params.items():
        if v.ndim == 2:
            v *= 10
    tok = rng.integers(0, cfg.vocab, (2, 8))
    tgt = rng.integers(0, cfg.vocab, (2, 8))
    _, grads = model.loss_and_grads(tok, tgt)
    errs = {}
    for name, p in model.params.items():
        idx = _sample(rng, p.size, per_param)
        if name == "tok_emb":
            idx = np.unique(tok.ravel())[:per_param] * p.shape[1]
        if not np.any(grads[name].flat[idx]):
            continue  # untouched rows, e.g. idle experts
        errs[name] = fd_rel_error(lambda: model.loss(tok, tgt), p, grads[name], h, idx)
    return errs
