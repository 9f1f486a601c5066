"""Training loop, relative-error metric, ablation grid and report writers."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .._validation import InvalidValueError
from ..layers import QLinearPolicy
from .config import TrainConfig
from .data import BatchSampler, load_corpus
from .model import TinyTransformer
from .optim import Adam, clip_grad_norm, lr_at

__all__ = [
    "RunMetrics",
    "AblationCell",
    "train",
    "relative_error",
    "relative_error_series",
    "ablation_grid",
    "ablate",
    "run_many",
    "metrics_csv",
    "ablation_csv",
    "manifest",
    "COMPONENT_ORDER",
]

METRICS_HEADER = ("step", "tokens", "loss", "lr")


@dataclass
class RunMetrics:
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    tokens: list = field(default_factory=list)  # cumulative tokens after each step
    config_hash: str = ""
    wall_time: float = 0.0
    divergence: list = field(default_factory=list)  # [{"step": i, "loss": repr}]
    config: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.losses)

    @property
    def diverged(self) -> bool:
        return bool(self.divergence)

    @property
    def tokens_seen(self) -> int:
        return self.tokens[-1] if self.tokens else 0

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan


def train(cfg: TrainConfig, progress=None, return_model: bool = False):
    """Next-token training of the configured tiny model.

    A non-finite loss (or gradient) records a divergence event at that step
    and ends the run early; the metrics are still returned.
    """
    t0 = time.perf_counter()
    metrics = RunMetrics(config_hash=cfg.config_hash(), config=cfg.to_dict())
    ids = load_corpus(cfg.data) if cfg.run.steps else None
    dtype = np.dtype(cfg.run.dtype)
    model = TinyTransformer(cfg.model, cfg.precision, seed=cfg.run.seed, dtype=dtype)
    opt = Adam(model.params, cfg.optim)
    sampler = BatchSampler(ids, cfg.data.batch, cfg.data.seq_len, seed=cfg.run.seed) if ids is not None else None
    per_step = cfg.data.batch * cfg.data.seq_len
    steps = cfg.run.steps

    for step in range(steps):
        x, y = sampler.get(step)
        model.set_step(step)
        try:
            loss, grads = model.loss_and_grads(x, y)
        except (InvalidValueError, FloatingPointError):
            loss, grads = math.nan, None
        if not math.isfinite(loss) or grads is None:
            metrics.divergence.append({"step": step, "loss": repr(loss)})
            break
        clip_grad_norm(grads, cfg.optim.grad_clip)
        lr = lr_at(step, steps, cfg.optim)
        opt.step(grads, lr)
        metrics.losses.append(float(loss))
        metrics.lrs.append(lr)
        metrics.tokens.append((step + 1) * per_step)
        if progress is not None:
            progress(step, loss)

    if cfg.run.checkpoint:
        np.savez(cfg.run.checkpoint, **model.params)
    metrics.wall_time = time.perf_counter() - t0
    return (metrics, model) if return_model else metrics


def _losses(m) -> np.ndarray:
    return np.asarray(m.losses if isinstance(m, RunMetrics) else m, dtype=np.float64)


def relative_error_series(baseline, lp) -> np.ndarray:
    """Per-step ``|loss_base - loss_lp| / loss_base``."""
    b, q = _losses(baseline), _losses(lp)
    if b.shape != q.shape:
        raise ValueError(f"loss series lengths differ: {b.size} vs {q.size}")
    return np.abs(b - q) / b


def relative_error(baseline, lp, window: tuple[int, int] | None = None) -> float:
    """Mean per-step relative loss error over ``window`` = [start, stop).

    The default window is the final 10% of steps (at least one step).
    """
    r = relative_error_series(baseline, lp)
    n = r.size
    if window is None:
        window = (n - max(1, n // 10), n)
    start, stop = window
    if n == 0 or not 0 <= start < stop <= n:
        raise ValueError(f"window {window} is empty or outside the {n}-step series")
    return float(np.mean(r[start:stop]))


# ── ablation ─────────────────────────────────────────────────────

COMPONENT_ORDER = ("SR", "RHT", "TF")


def ablation_grid(scheme: str) -> list[tuple[str, ...]]:
    """Component subsets in column order: pure, singles, pairs, triple.
    TF is MXFP4-only, so HiF4 gets four cells."""
    comps = COMPONENT_ORDER if scheme == "mxfp4" else ("SR", "RHT")
    if scheme not in ("mxfp4", "hif4"):
        raise ValueError(f"ablation needs scheme mxfp4 or hif4, got {scheme!r}")
    return [c for r in range(len(comps) + 1) for c in itertools.combinations(comps, r)]


@dataclass
class AblationCell:
    scheme: str
    components: tuple
    relative_error: float
    metrics: RunMetrics | None = None

    def __post_init__(self):
        if "TF" in self.components and self.scheme != "mxfp4":
            raise ValueError("TF applies to MXFP4 only")

    @property
    def label(self) -> str:
        return "+".join(self.components) if self.components else "pure"


def _train_job(cfg):
    return train(cfg)


def run_many(cfgs, jobs: int = 1) -> list[RunMetrics]:
    """Train each config, in a process pool when ``jobs > 1``; order is preserved."""
    cfgs = list(cfgs)
    if jobs <= 1 or len(cfgs) <= 1:
        return [train(c) for c in cfgs]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_train_job, cfgs))


def ablate(base_cfg: TrainConfig, scheme: str, jobs: int = 1, baseline: RunMetrics | None = None,
           window=None) -> tuple[RunMetrics, list[AblationCell]]:
    """One run per grid cell, all sharing seed and data order with the
    full-precision baseline; only the precision flags differ."""
    grid = ablation_grid(scheme)
    cfgs = [base_cfg.with_policy(QLinearPolicy.from_components(scheme, c)) for c in grid]
    if baseline is None:
        cfgs.insert(0, base_cfg.with_policy(QLinearPolicy.full_precision()))
    runs = run_many(cfgs, jobs)
    if baseline is None:
        baseline, runs = runs[0], runs[1:]
    cells = []
    for comps, m in zip(grid, runs):
        err = math.inf if m.diverged else relative_error(baseline, m, window)
        cells.append(AblationCell(scheme, comps, err, m))
    return baseline, cells


# ── reports ──────────────────────────────────────────────────────


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_csv(m: RunMetrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for i, (tok, loss, lr) in enumerate(zip(m.tokens, m.losses, m.lrs)):
        w.writerow((i, tok, _fmt(loss), _fmt(lr)))
    return buf.getvalue()


def ablation_csv(cells) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("scheme", "components", "relative_error_pct", "delta_vs_pure_pct", "diverged", "final_loss"))
    pure = next((c.relative_error for c in cells if not c.components), math.nan)
    for c in cells:
        diverged = bool(c.metrics and c.metrics.diverged)
        delta = c.relative_error - pure if c.components else math.nan
        w.writerow((c.scheme, c.label, _pct(c.relative_error), _pct(delta) if c.components else "",
                    int(diverged), _fmt(c.metrics.final_loss) if c.metrics else ""))
    return buf.getvalue()


def _pct(x: float) -> str:
    return "inf" if math.isinf(x) else f"{100.0 * x:.6f}"


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def manifest(m: RunMetrics, extra: dict | None = None) -> dict:
    """Everything needed to replay the run. Wall time is left out so reruns
    produce identical manifests."""
    out = {
        "config": m.config,
        "config_hash": m.config_hash,
        "seed": m.config.get("run", {}).get("seed"),
        "git_describe": _git_describe(),
        "steps_completed": m.steps,
        "tokens_seen": m.tokens_seen,
        "divergence": m.divergence,
    }
    if extra:
        out.update(extra)
    return out


def write_run(m: RunMetrics, csv_path, manifest_path=None) -> None:
    Path(csv_path).write_text(metrics_csv(m))
    if manifest_path:
        Path(manifest_path).write_text(json.dumps(manifest(m), indent=2, sort_keys=True) + "\n")
