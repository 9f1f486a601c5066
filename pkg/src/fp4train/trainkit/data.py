"""Byte-level corpus and deterministic batch sampling."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

__all__ = ["DataConfig", "ByteTokenizer", "synthetic_corpus", "load_corpus", "BatchSampler"]


@dataclass(frozen=True)
class DataConfig:
    corpus: str = ""  # path to a text file; empty selects the synthetic corpus
    tokenizer: str = "byte"
    synthetic_bytes: int = 5_000_000
    synthetic_seed: int = 1234
    batch: int = 8
    seq_len: int = 256

    def __post_init__(self):
        if self.tokenizer != "byte":
            raise ValueError(f"data.tokenizer must be 'byte', got {self.tokenizer!r}")
        if self.batch <= 0 or self.seq_len <= 0:
            raise ValueError("data.batch and data.seq_len must be positive")
        if not self.corpus and self.synthetic_bytes <= 0:
            raise ValueError("data.synthetic_bytes must be positive when no corpus is given")


class ByteTokenizer:
    vocab_size = 256

    @staticmethod
    def encode(text: str | bytes) -> np.ndarray:
        if isinstance(text, str):
            text = text.encode("utf-8")
        return np.frombuffer(text, dtype=np.uint8).copy()

    @staticmethod
    def decode(ids) -> str:
        return bytes(np.asarray(ids, dtype=np.uint8)).decode("utf-8", errors="replace")


_ONSETS = ["", "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w",
           "br", "ch", "cl", "dr", "fl", "gr", "pl", "pr", "sh", "st", "th", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "ee", "oo", "ou"]
_CODAS = ["", "", "", "n", "r", "s", "t", "l", "m", "nd", "ng", "st", "ck"]


@lru_cache(maxsize=2)
def synthetic_corpus(n_bytes: int, seed: int = 1234, n_words: int = 3000) -> bytes:
    """Deterministic English-like text.

    Words are built from syllables; sentences come from a sparse first-order
    Markov chain over a Zipf-weighted vocabulary, so the stream has word,
    bigram and punctuation structure a small model can learn.
    """
    rng = np.random.default_rng(seed)
    words = set()
    while len(words) < n_words:
        n_syl = 1 + rng.poisson(0.9)
        words.add("".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS)
                          for _ in range(n_syl)))
    words = sorted(words, key=lambda s: (len(s), s))  # set order follows PYTHONHASHSEED
    zipf = 1.0 / np.arange(1, n_words + 1) ** 1.1
    zipf /= zipf.sum()
    fanout = 24
    succ = rng.choice(n_words, size=(n_words, fanout), p=zipf)
    succ_p = rng.dirichlet(np.full(fanout, 0.5), size=n_words)
    succ_cdf = np.cumsum(succ_p, axis=1)

    out, size = [], 0
    w = rng.choice(n_words, p=zipf)
    while size < n_bytes:
        n = 4 + rng.poisson(8)
        u = rng.random(n)
        sent = []
        for i in range(n):
            w = succ[w, min(np.searchsorted(succ_cdf[w], u[i]), fanout - 1)]
            sent.append(words[w])
        sent[0] = sent[0].capitalize()
        if n > 8 and rng.random() < 0.4:
            sent[n // 2] += ","
        s = " ".join(sent) + rng.choice([".", ".", ".", "?", "!"]) + ("\n" if rng.random() < 0.15 else " ")
        out.append(s)
        size += len(s)
    return "".join(out).encode("ascii")[:n_bytes]


def load_corpus(cfg: DataConfig) -> np.ndarray:
    """Token ids (uint8) of the configured corpus."""
    if cfg.corpus:
        data = Path(cfg.corpus).read_bytes()
    else:
        data = synthetic_corpus(cfg.synthetic_bytes, cfg.synthetic_seed)
    ids = ByteTokenizer.encode(data)
    if ids.size < cfg.seq_len + 2:
        raise ValueError(f"corpus has {ids.size} bytes; need more than seq_len + 1 = {cfg.seq_len + 1}")
    return ids


class BatchSampler:
    """Random windows chosen by a generator keyed on ``(seed, step)``, so the
    batch for a step never depends on what ran before it."""

    def __init__(self, ids: np.ndarray, batch: int, seq_len: int, seed: int = 0):
        self.ids = np.asarray(ids)
        self.batch = batch
        self.seq_len = seq_len
        self.seed = seed

    def get(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.Generator(np.random.Philox(key=[self.seed & ((1 << 64) - 1), step]))
        starts = rng.integers(0, self.ids.size - self.seq_len - 1, size=self.batch)
        win = self.ids[starts[:, None] + np.arange(self.seq_len + 1)].astype(np.int64)
        return win[:, :-1], win[:, 1:]
