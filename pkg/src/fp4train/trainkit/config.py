"""Training configuration and its INI file form.

A config file has the sections ``[model] [data] [optim] [precision] [run]``,
each holding ``key = value`` lines. Every key is optional; unknown sections
or keys are rejected so typos do not pass silently. Example::

    [model]
    kind = dense-tiny
    layers = 2
    d_model = 128

    [precision]
    scheme = hif4
    rht_dw = true

    [run]
    steps = 400
    seed = 0
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..layers import QLinearPolicy
from ..quantize import RoundingMode
from .data import DataConfig
from .model import ModelConfig
from .optim import OptimConfig

__all__ = ["RunConfig", "TrainConfig", "ConfigError", "load_config", "parse_config", "dump_config"]


class ConfigError(ValueError):
    """A config value failed to parse or validate; the message names the field."""


@dataclass(frozen=True)
class RunConfig:
    steps: int = 400
    seed: int = 0
    dtype: str = "float32"
    checkpoint: str = ""  # optional .npz path for the final master weights

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("run.steps must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("run.dtype must be float32 or float64")


# INI key -> QLinearPolicy field
_PRECISION_KEYS = {
    "scheme": "scheme",
    "sr_grads": "use_sr_grads",
    "rht_dw": "use_rht_dw",
    "tf": "use_tf",
    "rht_block": "rht_block",
    "sr_rounding": "sr_rounding",
}


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    precision: QLinearPolicy = field(default_factory=QLinearPolicy.full_precision)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if self.data.seq_len > self.model.seq_len:
            raise ValueError("data.seq_len must not exceed model.seq_len")
        if self.model.vocab < 256:
            raise ValueError("model.vocab must be at least 256 for the byte tokenizer")
        if self.run.steps > 0 and self.optim.warmup_steps >= self.run.steps:
            raise ValueError("optim.warmup_steps must be smaller than run.steps")

    def replace(self, **sections) -> TrainConfig:
        return dataclasses.replace(self, **sections)

    def with_policy(self, policy: QLinearPolicy) -> TrainConfig:
        return dataclasses.replace(self, precision=policy)

    def with_seed(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seed=seed))

    def to_dict(self) -> dict:
        pol = self.precision
        prec = {k: getattr(pol, f) for k, f in _PRECISION_KEYS.items()}
        prec["sr_rounding"] = str(pol.sr_rounding)
        return {
            "model": dataclasses.asdict(self.model),
            "data": dataclasses.asdict(self.data),
            "optim": dataclasses.asdict(self.optim),
            "precision": prec,
            "run": dataclasses.asdict(self.run),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {"model": ModelConfig, "data": DataConfig, "optim": OptimConfig, "run": RunConfig}


def _coerce(section: str, key: str, raw: str, proto):
    where = f"{section}.{key}"
    try:
        if isinstance(proto, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(proto, int):
            return int(raw.replace("_", ""))
        if isinstance(proto, float):
            return float(raw)
        if isinstance(proto, RoundingMode):
            return RoundingMode.parse(raw.strip())
        return raw.strip()
    except ValueError:
        kind = "boolean" if isinstance(proto, bool) else type(proto).__name__
        raise ConfigError(f"{where}: expected {kind}, got {raw!r}") from None


def parse_config(text: str) -> TrainConfig:
    """Build a :class:`TrainConfig` from INI text."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = set(cp.sections()) - set(_SECTIONS) - {"precision"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")

    parts = {}
    for name, cls in _SECTIONS.items():
        defaults = cls()
        kw = {}
        if cp.has_section(name):
            valid = {f.name for f in fields(cls)}
            for key, raw in cp.items(name):
                if key not in valid:
                    raise ConfigError(f"{name}.{key}: unknown key")
                kw[key] = _coerce(name, key, raw, getattr(defaults, key))
        try:
            parts[name] = cls(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    kw = {}
    if cp.has_section("precision"):
        proto = QLinearPolicy.full_precision()
        for key, raw in cp.items("precision"):
            if key not in _PRECISION_KEYS:
                raise ConfigError(f"precision.{key}: unknown key")
            fname = _PRECISION_KEYS[key]
            kw[fname] = _coerce("precision", key, raw, getattr(proto, fname))
    try:
        parts["precision"] = QLinearPolicy(**kw)
        return TrainConfig(**parts)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def dump_config(cfg: TrainConfig) -> str:
    """INI text that :func:`parse_config` maps back to ``cfg``."""
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for k, v in values.items():
            lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        lines.append("")
    return "\n".join(lines)
