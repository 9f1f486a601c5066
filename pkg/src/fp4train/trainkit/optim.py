"""Adam / AdamW over a dict of numpy parameters, plus the LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["OptimConfig", "Adam", "lr_at", "clip_grad_norm"]


@dataclass(frozen=True)
class OptimConfig:
    name: str = "adamw"  # "adam" or "adamw"
    lr_start: float = 3e-3
    lr_end: float = 3e-4
    warmup_steps: int = 20
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0  # 0 disables

    def __post_init__(self):
        if self.name not in ("adam", "adamw"):
            raise ValueError(f"optim.name must be 'adam' or 'adamw', got {self.name!r}")
        if not self.lr_start > 0:
            raise ValueError("optim.lr_start must be positive")
        if not 0 <= self.lr_end <= self.lr_start:
            raise ValueError("optim.lr_end must lie in [0, optim.lr_start]")
        if self.warmup_steps < 0:
            raise ValueError("optim.warmup_steps must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("optim.beta1 and optim.beta2 must lie in [0, 1)")
        if self.grad_clip < 0 or self.weight_decay < 0:
            raise ValueError("optim.grad_clip and optim.weight_decay must be non-negative")


def lr_at(step: int, steps: int, cfg: OptimConfig) -> float:
    """Linear warmup to ``lr_start`` at ``warmup_steps``, then cosine decay
    reaching ``lr_end`` at the final step ``steps - 1``."""
    w = cfg.warmup_steps
    if step < w:
        return cfg.lr_start * (step + 1) / (w + 1)
    span = steps - 1 - w
    if span <= 0:
        return cfg.lr_start
    t = min(1.0, (step - w) / span)
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + math.cos(math.pi * t))


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place to global L2 norm ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        f = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= f
    return norm


def _decays(name: str, p: np.ndarray) -> bool:
    # matrices only; norms and embeddings are left alone
    return p.ndim == 2 and not name.endswith("emb")


class Adam:
    """Adam with bias correction; ``adamw`` applies decoupled weight decay."""

    def __init__(self, params: dict, cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            if c.name == "adamw" and c.weight_decay and _decays(name, p):
                p *= 1.0 - lr * c.weight_decay
            p -= (lr / bc1) * m / (np.sqrt(v / bc2) + c.eps)
