"""The standard tiny-dense FP4 benchmark: one full-precision baseline and
four FP4 policies per seed, compared by trailing-window relative loss error."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from ..layers import QLinearPolicy
from .config import RunConfig, TrainConfig
from .data import DataConfig
from .model import ModelConfig
from .optim import OptimConfig
from .runner import relative_error, run_many

__all__ = ["BENCH_POLICIES", "benchmark_config", "BenchmarkResult", "run_benchmark"]

BENCH_POLICIES = {
    "hif4": QLinearPolicy("hif4"),
    "hif4+rht": QLinearPolicy.recommended("hif4"),
    "mxfp4": QLinearPolicy("mxfp4"),
    "mxfp4+sr+rht+tf": QLinearPolicy.recommended("mxfp4"),
}
RECOMMENDED = ("hif4+rht", "mxfp4+sr+rht+tf")


def benchmark_config(steps: int = 400, seed: int = 0, batch: int = 8) -> TrainConfig:
    """2 layers, d_model 128, 4 heads, 256-token windows of the synthetic byte corpus."""
    return TrainConfig(
        model=ModelConfig(kind="dense-tiny", layers=2, d_model=128, heads=4, ffn_mult=4, seq_len=256),
        data=DataConfig(batch=batch, seq_len=256),
        optim=OptimConfig(name="adamw", lr_start=3e-3, lr_end=3e-4, warmup_steps=min(20, max(steps - 1, 0))),
        run=RunConfig(steps=steps, seed=seed),
    )


@dataclass
class BenchmarkResult:
    seeds: list
    baselines: dict = field(default_factory=dict)  # seed -> RunMetrics
    runs: dict = field(default_factory=dict)  # (seed, policy) -> RunMetrics
    errors: dict = field(default_factory=dict)  # (seed, policy) -> relative error

    def mean_error(self, policy: str) -> float:
        return float(np.mean([self.errors[(s, policy)] for s in self.seeds]))

    def diverged(self, policy: str) -> bool:
        return any(self.runs[(s, policy)].diverged for s in self.seeds)

    def tokens(self) -> int:
        runs = list(self.baselines.values()) + list(self.runs.values())
        return sum(m.tokens_seen for m in runs)

    def orderings(self) -> dict:
        e = self.mean_error
        best_hif = min(e("hif4"), e("hif4+rht"))
        best_mx = min(e("mxfp4"), e("mxfp4+sr+rht+tf"))
        return {
            "a_hif4_rht_le_pure": e("hif4+rht") <= e("hif4"),
            "b_mxfp4_rec_lt_pure": e("mxfp4+sr+rht+tf") < e("mxfp4"),
            "c_best_hif4_le_best_mxfp4": best_hif <= best_mx,
            "d_no_divergence_recommended": not any(self.diverged(p) for p in RECOMMENDED),
            "best_hif4": best_hif,
            "best_mxfp4": best_mx,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("seed", "policy", "relative_error_pct", "final_loss", "diverged"))
        for s in self.seeds:
            w.writerow((s, "fp", "0.000000", repr(self.baselines[s].final_loss), int(self.baselines[s].diverged)))
            for p in BENCH_POLICIES:
                m = self.runs[(s, p)]
                err = self.errors[(s, p)]
                w.writerow((s, p, "inf" if math.isinf(err) else f"{100 * err:.6f}", repr(m.final_loss),
                            int(m.diverged)))
        for p in BENCH_POLICIES:
            w.writerow(("mean", p, f"{100 * self.mean_error(p):.6f}", "", int(self.diverged(p))))
        return buf.getvalue()


def run_benchmark(base: TrainConfig, seeds=(0, 1, 2), jobs: int = 1, window=None) -> BenchmarkResult:
    seeds = list(seeds)
    cfgs, keys = [], []
    for s in seeds:
        cs = base.with_seed(s)
        cfgs.append(cs.with_policy(QLinearPolicy.full_precision()))
        keys.append((s, "fp"))
        for name, pol in BENCH_POLICIES.items():
            cfgs.append(cs.with_policy(pol))
            keys.append((s, name))
    res = BenchmarkResult(seeds)
    for key, m in zip(keys, run_many(cfgs, jobs)):
        if key[1] == "fp":
            res.baselines[key[0]] = m
        else:
            res.runs[key] = m
    for (s, p), m in res.runs.items():
        diverged = m.diverged or res.baselines[s].diverged
        res.errors[(s, p)] = math.inf if diverged else relative_error(res.baselines[s], m, window)
    return res
