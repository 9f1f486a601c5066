"""Desk-scale training harness: tiny transformer, Adam, data, configs, runs."""

from .benchmark import BENCH_POLICIES, BenchmarkResult, benchmark_config, run_benchmark
from .config import ConfigError, RunConfig, TrainConfig, dump_config, load_config, parse_config
from .data import BatchSampler, ByteTokenizer, DataConfig, load_corpus, synthetic_corpus
from .model import ModelConfig, TinyTransformer
from .optim import Adam, OptimConfig, lr_at
from .runner import (AblationCell, RunMetrics, ablate, ablation_grid, relative_error, relative_error_series,
                     train)

__all__ = [
    "ModelConfig", "TinyTransformer", "OptimConfig", "Adam", "lr_at", "DataConfig", "ByteTokenizer",
    "BatchSampler", "load_corpus", "synthetic_corpus", "RunConfig", "TrainConfig", "ConfigError",
    "load_config", "parse_config", "dump_config", "RunMetrics", "AblationCell", "train", "relative_error",
    "relative_error_series", "ablation_grid", "ablate", "BENCH_POLICIES", "BenchmarkResult",
    "benchmark_config", "run_benchmark",
]
