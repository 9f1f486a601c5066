"""Acceptance suite: one PASS/FAIL line per criterion.

Run under pytest (the lines are repeated in the terminal summary) or
directly with ``python3 tests/test_acceptance.py``. The training benchmark
behind criterion 10 takes about an hour on one core; set
``FP4TRAIN_BENCH_STEPS`` to shorten it for a quick look (the verdict is
only meaningful at the default 400 steps).

Criteria listed in KNOWN_GAPS are expected to fail for reasons recorded in
the decisions ledger. Under pytest they are strict xfails, so an unexpected
pass also shows up.
"""

from __future__ import annotations

import json
import math
import os
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

import _gradcheck as G  # noqa: E402
from fp4train import costmodel as cm  # noqa: E402
from fp4train import formats as F  # noqa: E402
from fp4train.hadamard import RhtSpec, rht_apply  # noqa: E402
from fp4train.qgemm import GemmConfig, qgemm  # noqa: E402
from fp4train.quantize import fake_quantize, quantize_tensor  # noqa: E402

RESULTS: dict[int, str] = {}
KNOWN_GAPS = {
    9: "public Llama-3-8B dimensions give ~86.9% under the parameter-count convention",
    10: "orderings (a) and (c) miss by less than the seed-to-seed spread at 400 steps",
}
BENCH_STEPS = int(os.environ.get("FP4TRAIN_BENCH_STEPS", "400"))


def report(n: int, ok: bool, detail: str, elapsed: float) -> bool:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.2f}s]"
    RESULTS[n] = line
    print(line, flush=True)
    return ok


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# ── 1. format exactness ──────────────────────────────────────────


def c1():
    def run():
        e2m1 = sorted({float(abs(v)) for v in F.decode_e2m1(np.arange(16))})
        s1p2 = sorted({float(abs(v)) for v in F.decode_s1p2(np.arange(16))})
        tables = (e2m1 == [0, 0.5, 1, 1.5, 2, 3, 4, 6]
                  and s1p2 == [0.25 * i for i in range(8)]
                  and all(F.decode_e2m1(c) == -F.decode_e2m1(c & 7) for c in range(8, 16))
                  and all(F.decode_s1p2(c) == -F.decode_s1p2(c & 7) for c in range(8, 16)))
        rng = np.random.default_rng(0)
        n = 10_000
        sc, el = rng.integers(0, 256, n), rng.integers(0, 16, (n, 32))
        mx = all(np.array_equal(a, b) for a, b in zip(F.unpack_mx_arrays(F.pack_mx_arrays(sc, el)), (sc, el)))
        hif_in = (rng.integers(0, 256, n), rng.integers(0, 2, (n, 8)), rng.integers(0, 2, (n, 16)),
                  rng.integers(0, 16, (n, 64)))
        hif = all(np.array_equal(a, b) for a, b in zip(F.unpack_hif_arrays(F.pack_hif_arrays(*hif_in)), hif_in))
        return tables, mx, hif

    (tables, mx, hif), dt = _timed(run)
    ok = tables and mx and hif and dt < 1.0
    return report(1, ok, f"decode tables exact={tables}, 1e4-block round trip mxfp4={mx} hif4={hif}", dt)


# ── 2. storage accounting ────────────────────────────────────────


def c2():
    def run():
        x = np.random.default_rng(1).standard_normal((64, 256))
        return quantize_tensor(x, "mxfp4").bits_per_value(), quantize_tensor(x, "hif4").bits_per_value()

    (mx, hif), dt = _timed(run)
    return report(2, mx == 4.25 and hif == 4.5, f"bits/value mxfp4={mx} hif4={hif}", dt)


# ── 3. SR unbiasedness ───────────────────────────────────────────


def _sr_check(scheme, bs, top, per_block, draws, rng):
    n_blocks = -(-100 // per_block)
    row = np.zeros(n_blocks * bs)
    pos = []
    for b in range(n_blocks):
        row[b * bs] = top  # pins the block scale so every scalar stays in range
        k = min(per_block, 100 - len(pos))
        idx = b * bs + 1 + np.arange(k)
        row[idx] = rng.uniform(-top, top, k)
        pos.extend(idx.tolist())
    pos = np.array(pos)
    s = np.zeros(pos.size)
    s2 = np.zeros(pos.size)
    chunk = 20_000
    for c in range(draws // chunk):
        q = fake_quantize(np.tile(row, (chunk, 1)), scheme, rounding="sr", seed=100 + c)[:, pos]
        s += q.sum(0)
        s2 += (q * q).sum(0)
    mean = s / draws
    sd = np.sqrt(np.maximum(s2 / draws - mean ** 2, 0))
    z = np.abs(mean - row[pos]) / np.maximum(sd / np.sqrt(draws), 1e-300)
    return float(np.max(np.where(sd > 0, z, 0))), len(pos)


def c3():
    def run():
        rng = np.random.default_rng(3)
        return (_sr_check("mxfp4", 32, 6.0, 25, 100_000, rng), _sr_check("hif4", 64, 1.75, 50, 100_000, rng))

    ((zm, nm), (zh, nh)), dt = _timed(run)
    ok = zm < 4 and zh < 4 and nm == nh == 100 and dt < 30
    return report(3, ok, f"max |mean-x|/SE over 100 scalars x 1e5 draws: mxfp4={zm:.2f} hif4={zh:.2f}", dt)


# ── 4. RHT identities ────────────────────────────────────────────


def c4():
    def run():
        worst_orth = worst_prod = 0.0
        rng = np.random.default_rng(4)
        for p in range(1, 11):
            k = 2 ** p
            spec = RhtSpec(k, seed=p)
            m = spec.matrix()
            worst_orth = max(worst_orth, float(np.max(np.abs(m @ m.T - np.eye(k)))))
            A, B = rng.standard_normal((2 * k, 16)), rng.standard_normal((2 * k, 12))
            ref = A.T @ B
            got = rht_apply(A, spec).T @ rht_apply(B, spec)
            worst_prod = max(worst_prod, float(np.max(np.abs(got - ref)) / np.max(np.abs(ref))))
        return worst_orth, worst_prod

    (orth, prod), dt = _timed(run)
    ok = orth < 1e-6 and prod < 1e-6 and dt < 10
    return report(4, ok, f"k=2..1024: max|HS(HS)^T - I|={orth:.1e}, product rel err={prod:.1e}", dt)


# ── 5. truncation-free guarantee ─────────────────────────────────


def c5():
    def heavy(rng, n, bs):
        # Student-t entries, each block rescaled so its amax lies in [2^-40, 2^14],
        # inside both scale formats' ranges
        x = rng.standard_t(1.5, (n, bs))
        amax = np.max(np.abs(x), axis=1, keepdims=True)
        return x / amax * np.exp2(rng.uniform(-40, 14, (n, 1)))

    def run():
        rng = np.random.default_rng(5)
        n = 100_000
        mx = heavy(rng, n, 32)
        _, std = fake_quantize(mx, "mxfp4", return_clips=True)
        _, tf = fake_quantize(mx, "mxfp4", scaling="tf", return_clips=True)
        _, hif = fake_quantize(heavy(rng, n, 64), "hif4", return_clips=True)
        return std, tf, hif

    (std, tf, hif), dt = _timed(run)
    ok = tf == 0 and std > 0 and hif == 0 and dt < 30
    return report(5, ok, f"clips over 1e5 heavy-tailed blocks: standard={std} tf={tf} hif4={hif}", dt)


# ── 6. GEMM oracle ───────────────────────────────────────────────


def c6():
    def run():
        rng = np.random.default_rng(6)
        sizes = (1, 31, 64, 100, 128)
        worst, count = 0.0, 0
        for scheme in ("mxfp4", "hif4"):
            for rounding in ("nr", "sr", "sr-additive"):
                cfg = GemmConfig(scheme, rounding, rounding)
                for M in sizes:
                    for N in sizes:
                        for K in sizes:
                            A, B = rng.standard_normal((M, K)), rng.standard_normal((N, K))
                            qa = quantize_tensor(A, scheme, "row", rounding, "standard", 7, 0).dequantize()
                            qb = quantize_tensor(B, scheme, "row", rounding, "standard", 7, 1).dequantize()
                            ref = qa @ qb.T
                            got = qgemm(A, B, cfg, seed=7)
                            scale = max(float(np.max(np.abs(ref))), 1e-300)
                            worst = max(worst, float(np.max(np.abs(got - ref))) / scale)
                            count += 1
        return worst, count

    (worst, count), dt = _timed(run)
    ok = worst < 1e-6 and dt < 60
    return report(6, ok, f"{count} (shape, scheme, rounding) cases up to 128^3: max rel diff={worst:.1e}", dt)


# ── 7. gradient correctness ──────────────────────────────────────


def c7():
    def run():
        dense = max(G.model_fd_errors("dense-tiny").values())
        moe = max(G.model_fd_errors("moe-tiny").values())
        layer = max(G.moe_fd_errors(8, 2).values())
        return dense, moe, layer

    (dense, moe, layer), dt = _timed(run)
    ok = max(dense, moe, layer) < 1e-4 and dt < 60
    return report(7, ok, f"finite-difference rel err: dense={dense:.1e} moe={moe:.1e} moe-layer(8x top-2)={layer:.1e}",
                  dt)


# ── 8. overhead calculator ────────────────────────────────────────


def c8():
    def closed_forms(M, N, K, r, j):
        lg = math.log2(r)
        return {
            "QuartetII": (2 * K * (M + N), N * (1 + lg) * (M + K), M * (1 + lg) * (N + K)),
            "Metis": (M * j * (K + N), M * N * (math.log2(j) + j) + K * j * (M + N), K * j * (M + N)),
            "Nvidia": (0, 0, M * lg * (N + K)),
        }

    def run():
        rng = np.random.default_rng(8)
        dims = [(128, 256, 512, 64, 16)] + [
            (int(rng.integers(1, 5000)), int(rng.integers(1, 5000)), int(rng.integers(1, 5000)),
             int(2 ** rng.integers(0, 12)), 1) for _ in range(50)]
        cells_ok = True
        for M, N, K, r, j in dims:
            want = closed_forms(M, N, K, r, j)
            for method in cm.METHODS:
                cells_ok &= cm.overhead_flops(method, cm.GemmDims(M, N, K, r, j)) == want[method]
        nv = cm.overhead_flops("Nvidia", cm.GemmDims(128, 256, 512, 64))[2]
        return cells_ok, nv, len(dims)

    (cells_ok, nv, n), dt = _timed(run)
    return report(8, cells_ok and nv == 589_824, f"9 cells agree on {n} dimension sets; Nvidia dW={nv:.0f}", dt)


# ── 9. FP4 parameter fraction ──────────────────────────────────────────


def c9():
    def run():
        pub = cm.fp4_fraction(cm.PRESETS["llama3-8b"])
        l16 = cm.fp4_fraction(cm.PRESETS["llama3-8b-16l"])
        pangu = cm.fp4_fraction(cm.PRESETS["openpangu-1b"])
        return pub, l16, pangu

    (pub, l16, pangu), dt = _timed(run)
    ok = abs(pub["total"] - 76.82) <= 1.0
    detail = (f"public Llama-3-8B (32 blocks, {pub['total_params'] / 1e9:.2f}B params) total={pub['total']:.2f}% "
              f"vs 76.82+-1; diagnostic: 16-block variant {l16['total']:.2f}%, OpenPangu-1B {pangu['total']:.2f}%")
    return report(9, ok, detail, dt)


# ── 10. training-dynamics orderings ──────────────────────────────

_BENCH: dict = {}


def run_benchmark_once():
    if "res" not in _BENCH:
        from fp4train.trainkit.benchmark import benchmark_config, run_benchmark

        t0 = time.perf_counter()
        _BENCH["res"] = run_benchmark(benchmark_config(BENCH_STEPS), seeds=(0, 1, 2))
        _BENCH["time"] = time.perf_counter() - t0
    return _BENCH["res"], _BENCH["time"]


def c10():
    res, dt = run_benchmark_once()
    o = res.orderings()
    band = o["best_hif4"] < 0.05 and o["best_mxfp4"] < 0.05
    parts = ["a_hif4_rht_le_pure", "b_mxfp4_rec_lt_pure", "c_best_hif4_le_best_mxfp4", "d_no_divergence_recommended"]
    ok = all(o[p] for p in parts) and band and dt <= 7200
    errs = " ".join(f"{p}={100 * res.mean_error(p):.3f}%" for p in ("hif4", "hif4+rht", "mxfp4", "mxfp4+sr+rht+tf"))
    flags = " ".join(f"({p[0]})={'ok' if o[p] else 'FAIL'}" for p in parts)
    detail = (f"{flags} band<5%={'ok' if band else 'FAIL'}; mean rel err over 3 seeds: {errs}; "
              f"{res.tokens() / 1e6:.1f}M tokens at {BENCH_STEPS} steps")
    return report(10, ok, detail, dt)


# ── 11. determinism ──────────────────────────────────────────────

_CFG = """\
[model]
layers = 1
d_model = 32
heads = 2
ffn_mult = 2
seq_len = 32
[data]
batch = 2
seq_len = 32
synthetic_bytes = 20000
[optim]
warmup_steps = 1
[run]
steps = 4
seed = 3
[precision]
scheme = mxfp4
sr_grads = true
rht_dw = true
tf = true
"""


def _cli(argv, hash_seed):
    # a fresh interpreter per call, with a different string-hash seed per rerun
    env = {**os.environ, "PYTHONHASHSEED": str(hash_seed)}
    proc = subprocess.run([sys.executable, "-m", "fp4train.cli", *argv], capture_output=True, env=env)
    return proc.returncode, proc.stdout.decode()


def c11():
    def run():
        from fp4train import io as fio

        results = {}
        for i in range(2):
            d = Path(tempfile.mkdtemp(prefix=f"fp4acc{i}_"))
            (d / "c.ini").write_text(_CFG)
            fio.write_tsr(d / "x.tsr", np.random.default_rng(0).standard_normal((16, 80)).astype(np.float32))
            _cli(["train", "--config", str(d / "c.ini"), "--out-dir", str(d / "train")], i + 1)
            _cli(["ablate", "--config", str(d / "c.ini"), "--scheme", "mxfp4", "-o", str(d / "ablate.csv")], i + 1)
            _cli(["benchmark", "--steps", "2", "--batch", "1", "--seeds", "0", "1", "-o", str(d / "bench.csv")], i + 1)
            _, analyze = _cli(["analyze", "--table1", "128", "256", "512", "64", "16", "--preset", "qwen3-moe-30b"], i + 1)
            _, quant = _cli(["quantize", str(d / "x.tsr"), "-o", str(d / "x.qtz"), "--rounding", "sr", "--seed", "5"], i + 1)
            results[i] = {
                "train/metrics.csv": (d / "train" / "metrics.csv").read_bytes(),
                "train/manifest.json": (d / "train" / "manifest.json").read_bytes(),
                "ablate.csv": (d / "ablate.csv").read_bytes(),
                "bench.csv": (d / "bench.csv").read_bytes(),
                "analyze.csv": analyze.encode(),
                "x.qtz": (d / "x.qtz").read_bytes(),
                "quantize report": quant.encode(),
            }
        return {k: results[0][k] == results[1][k] for k in results[0]}

    same, dt = _timed(run)
    ok = all(same.values())
    bad = [k for k, v in same.items() if not v]
    return report(11, ok, f"{len(same)} outputs byte-identical across two processes with different hash seeds" + (f"; differ: {bad}" if bad else ""),
                  dt)


CHECKS = {1: c1, 2: c2, 3: c3, 4: c4, 5: c5, 6: c6, 7: c7, 8: c8, 9: c9, 10: c10, 11: c11}


@pytest.mark.parametrize("n", sorted(CHECKS))
def test_criterion(n):
    ok = CHECKS[n]()
    if n in KNOWN_GAPS:
        if ok:
            pytest.fail(f"criterion {n} now passes; remove it from KNOWN_GAPS and the ledger entry")
        pytest.xfail(KNOWN_GAPS[n])
    assert ok, RESULTS[n]


if __name__ == "__main__":
    wanted = [int(a) for a in sys.argv[1:]] or sorted(CHECKS)
    verdicts = [CHECKS[n]() for n in wanted]
    print(json.dumps({"passed": sum(verdicts), "failed": len(verdicts) - sum(verdicts)}))
