"""Analytical cost and parameter-fraction calculators.

``overhead_flops`` gives the extra high-precision work that three published
FP4 training recipes spend per GEMM triple (forward ``Y = X W^T``, input
gradient ``dX = D W``, weight gradient ``dW = D^T X`` with ``X`` M x K,
``W`` N x K). Logs are base 2.

``fp4_fraction`` counts the parameters held by each quantized linear
component of a transformer as a share of all parameters (embeddings, output
head, norms and routers included in the denominator, never in FP4).
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields

from ._validation import is_power_of_two

__all__ = [
    "GemmDims",
    "METHODS",
    "overhead_flops",
    "table1",
    "ModelSpec",
    "COMPONENTS",
    "component_params",
    "fp4_fraction",
    "moe_active_fraction",
    "PRESETS",
    "load_model_spec",
    "table1_csv",
    "table2_csv",
    "report_json",
]

METHODS = ("QuartetII", "Metis", "Nvidia")
_ALIASES = {"quartetii": "QuartetII", "quartet2": "QuartetII", "quartet-ii": "QuartetII",
            "quartet_ii": "QuartetII", "metis": "Metis", "nvidia": "Nvidia"}


@dataclass(frozen=True)
class GemmDims:
    M: int
    N: int
    K: int
    r: int = 64
    j: int | None = None

    def __post_init__(self):
        for name in ("M", "N", "K", "r"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not is_power_of_two(self.r):
            raise ValueError(f"RHT block size r must be a power of two, got {self.r}")
        if self.j is not None and not (isinstance(self.j, int) and 1 <= self.j <= min(self.M, self.N, self.K)):
            raise ValueError(f"rank j must be an integer in [1, min(M, N, K)], got {self.j!r}")


def _method(name: str) -> str:
    key = _ALIASES.get(str(name).lower())
    if key is None:
        raise ValueError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}")
    return key


def overhead_flops(method: str, dims: GemmDims) -> tuple[float, float, float]:
    """(forward, dX, dW) extra element operations; cells without overhead are 0."""
    m = _method(method)
    M, N, K, lr = dims.M, dims.N, dims.K, math.log2(dims.r)
    if m == "QuartetII":
        return 2 * K * (M + N), N * (1 + lr) * (M + K), M * (1 + lr) * (N + K)
    if m == "Metis":
        if dims.j is None:
            raise ValueError("Metis needs the randomized-SVD rank j")
        j = dims.j
        return M * j * (K + N), M * N * (math.log2(j) + j) + K * j * (M + N), K * j * (M + N)
    return 0, 0, M * lr * (N + K)


def table1(dims: GemmDims) -> list[dict]:
    """One row per method; Metis is skipped when ``dims.j`` is unset."""
    rows = []
    for m in METHODS:
        if m == "Metis" and dims.j is None:
            continue
        fwd, dx, dw = overhead_flops(m, dims)
        rows.append({"method": m, "forward": fwd, "dX": dx, "dW": dw})
    return rows


# ── parameter accounting ─────────────────────────────────────────

COMPONENTS = ("qkv", "out", "fc1", "fc2", "up", "down")


@dataclass(frozen=True)
class ModelSpec:
    """Transformer shape. A spec with ``n_experts > 0`` replaces the dense FFN
    by routed experts of width ``expert_hidden``; ``gated_ffn`` counts FC1 (or
    expert up) as the fused gate and up projections."""

    name: str = "model"
    layers: int = 1
    d_model: int = 64
    heads: int = 1
    kv_heads: int | None = None
    head_dim: int | None = None
    ffn_hidden: int = 0
    vocab: int = 0
    gated_ffn: bool = False
    tied_embeddings: bool = False
    qk_norm: bool = False
    n_experts: int = 0
    top_k: int = 0
    expert_hidden: int = 0
    fp4: tuple = COMPONENTS  # components stored/computed in FP4

    def __post_init__(self):
        for name in ("layers", "d_model", "heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("ffn_hidden", "vocab", "n_experts", "top_k", "expert_hidden"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.kv_heads is None:
            object.__setattr__(self, "kv_heads", self.heads)
        if self.head_dim is None:
            if self.d_model % self.heads:
                raise ValueError("d_model must be divisible by heads when head_dim is not given")
            object.__setattr__(self, "head_dim", self.d_model // self.heads)
        if self.kv_heads <= 0 or self.head_dim <= 0:
            raise ValueError("kv_heads and head_dim must be positive")
        if self.n_experts and not 1 <= self.top_k <= self.n_experts:
            raise ValueError("top_k must lie in [1, n_experts]")
        if not self.n_experts and (self.top_k or self.expert_hidden):
            raise ValueError("top_k / expert_hidden need n_experts > 0")
        fp4 = tuple(self.fp4)
        bad = set(fp4) - set(COMPONENTS)
        if bad:
            raise ValueError(f"unknown FP4 component(s): {sorted(bad)}")
        object.__setattr__(self, "fp4", fp4)

    @property
    def is_moe(self) -> bool:
        return self.n_experts > 0


def component_params(spec: ModelSpec) -> dict:
    """Parameter count per component, summed over layers. Keys: the six
    linear components plus ``router``, ``norms``, ``embedding``, ``head``."""
    d, L, hd = spec.d_model, spec.layers, spec.head_dim
    q_dim = spec.heads * hd
    gate = 2 if spec.gated_ffn else 1
    c = dict.fromkeys(COMPONENTS, 0)
    c["qkv"] = L * d * (q_dim + 2 * spec.kv_heads * hd)
    c["out"] = L * q_dim * d
    if spec.is_moe:
        c["up"] = L * spec.n_experts * gate * d * spec.expert_hidden
        c["down"] = L * spec.n_experts * spec.expert_hidden * d
    else:
        c["fc1"] = L * gate * d * spec.ffn_hidden
        c["fc2"] = L * spec.ffn_hidden * d
    c["router"] = L * spec.n_experts * d
    c["norms"] = L * (2 * d + (2 * hd if spec.qk_norm else 0)) + d
    c["embedding"] = spec.vocab * d
    c["head"] = 0 if spec.tied_embeddings else spec.vocab * d
    return c


def fp4_fraction(spec: ModelSpec) -> dict:
    """Percent of all parameters in each FP4 component, and their total.

    Components that do not exist in the model (FC1/FC2 in an MoE, experts in
    a dense model) map to ``None``.
    """
    c = component_params(spec)
    total = sum(c.values())
    present = ("up", "down") if spec.is_moe else ("fc1", "fc2")
    out = {}
    for name in COMPONENTS:
        if name in ("qkv", "out") or name in present:
            out[name] = 100.0 * c[name] / total if name in spec.fp4 else 0.0
        else:
            out[name] = None
    fp4_params = sum(c[n] for n in COMPONENTS if n in spec.fp4)
    out["total"] = sum(v for v in out.values() if v is not None)
    out["total_params"] = total
    out["fp4_params"] = fp4_params
    return out


def moe_active_fraction(spec: ModelSpec, claimed_expert_pct: float | None = None) -> dict:
    """Per-token activity of an MoE model.

    ``expert_fraction`` is top_k / n_experts. ``active_param_fraction`` is the
    share of all parameters touched per token (everything except the idle
    experts). ``inactive_fp4_fraction`` is the share held by idle experts,
    which are only stored. When ``claimed_expert_pct`` is given and differs
    from the exact ratio, the result carries a ``discrepancy`` note.
    """
    if not spec.is_moe:
        raise ValueError(f"{spec.name} is not a mixture-of-experts spec")
    c = component_params(spec)
    total = sum(c.values())
    experts = c["up"] + c["down"]
    frac = spec.top_k / spec.n_experts
    idle = experts * (1.0 - frac)
    out = {
        "expert_ratio": f"{spec.top_k}/{spec.n_experts}",
        "expert_fraction": 100.0 * frac,
        "active_param_fraction": 100.0 * (total - idle) / total,
        "inactive_fp4_fraction": 100.0 * idle / total if {"up", "down"} <= set(spec.fp4) else 0.0,
    }
    if claimed_expert_pct is not None and abs(claimed_expert_pct - out["expert_fraction"]) > 1e-9:
        out["discrepancy"] = (f"claimed {claimed_expert_pct:g}% active experts, but "
                              f"{spec.top_k}/{spec.n_experts} = {out['expert_fraction']:.4g}%")
    return out


# Public architecture dimensions. "llama3-8b-16l" keeps every Llama-3-8B
# width but 16 blocks; that depth reproduces the published per-component
# fractions for that model, while the 32-block model does not.
PRESETS = {
    "openpangu-1b": ModelSpec("openpangu-1b", layers=26, d_model=1536, heads=12, kv_heads=6, head_dim=128,
                              ffn_hidden=6144, vocab=153376, gated_ffn=True, tied_embeddings=True),
    "llama3-8b": ModelSpec("llama3-8b", layers=32, d_model=4096, heads=32, kv_heads=8, ffn_hidden=14336,
                           vocab=128256, gated_ffn=True),
    "llama3-8b-16l": ModelSpec("llama3-8b-16l", layers=16, d_model=4096, heads=32, kv_heads=8,
                               ffn_hidden=14336, vocab=128256, gated_ffn=True),
    "qwen3-moe-30b": ModelSpec("qwen3-moe-30b", layers=48, d_model=2048, heads=32, kv_heads=4, head_dim=128,
                               vocab=151936, gated_ffn=True, qk_norm=True, n_experts=128, top_k=8,
                               expert_hidden=768),
}


def load_model_spec(path) -> ModelSpec:
    """Read ``[model]`` key = value lines (ModelSpec field names) from an INI file.
    ``fp4`` is a comma-separated component list; ``preset`` starts from a preset."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    with open(path) as fh:
        cp.read_file(fh)
    if not cp.has_section("model"):
        raise ValueError(f"{path}: missing [model] section")
    items = dict(cp.items("model"))
    base = {}
    if "preset" in items:
        name = items.pop("preset").strip()
        if name not in PRESETS:
            raise ValueError(f"model.preset: unknown preset {name!r}")
        base = asdict(PRESETS[name])
    types = {f.name: f for f in fields(ModelSpec)}
    for key, raw in items.items():
        if key not in types:
            raise ValueError(f"model.{key}: unknown key")
        raw = raw.strip()
        try:
            if key == "name":
                base[key] = raw
            elif key == "fp4":
                base[key] = tuple(s.strip() for s in raw.split(",") if s.strip())
            elif key in ("gated_ffn", "tied_embeddings", "qk_norm"):
                low = raw.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError
                base[key] = low in ("true", "1", "yes")
            else:
                base[key] = int(raw.replace("_", ""))
        except ValueError:
            raise ValueError(f"model.{key}: cannot parse {raw!r}") from None
    return ModelSpec(**base)


# ── reports ──────────────────────────────────────────────────────


def _num(x) -> str:
    return "--" if x is None or x == 0 else (f"{x:.0f}" if float(x).is_integer() else repr(float(x)))


def table1_csv(dims: GemmDims) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "forward", "dX", "dW"))
    for row in table1(dims):
        w.writerow((row["method"], _num(row["forward"]), _num(row["dX"]), _num(row["dW"])))
    return buf.getvalue()


def table2_csv(specs) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model",) + COMPONENTS + ("total",))
    for spec in specs:
        f = fp4_fraction(spec)
        w.writerow((spec.name,) + tuple("--" if f[c] is None else f"{f[c]:.2f}" for c in COMPONENTS)
                   + (f"{f['total']:.2f}",))
    return buf.getvalue()


def report_json(specs=(), dims: GemmDims | None = None, claimed_expert_pct: float | None = None) -> str:
    out: dict = {}
    if dims is not None:
        out["table1"] = {"dims": asdict(dims), "rows": table1(dims)}
    models = []
    for spec in specs:
        entry = {"spec": asdict(spec), "fp4_fraction": fp4_fraction(spec)}
        if spec.is_moe:
            entry["moe"] = moe_active_fraction(spec, claimed_expert_pct)
        models.append(entry)
    if models:
        out["models"] = models
    return json.dumps(out, indent=2, sort_keys=True) + "\n"
