"""``fp4train`` command line.

Exit codes: 0 success, 2 usage or config error, 3 data error (unreadable or
malformed file), 4 a training run diverged.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import costmodel as cm
from . import io as fio
from ._validation import MalformedInputError
from .quantize import RoundingMode, ScalingPolicy, quantize_tensor, relative_rms_error

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _rounding(text):
    try:
        return RoundingMode.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _read(fn, path):
    try:
        return fn(path)
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from None
    except MalformedInputError as exc:
        raise DataError(f"{path}: {exc}") from None


def _write_text(path, text):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)


# ── quantize / dequantize ────────────────────────────────────────


def cmd_quantize(args) -> int:
    scaling = ScalingPolicy.parse(args.scaling)
    if args.scheme == "hif4" and scaling is ScalingPolicy.TRUNCATION_FREE:
        raise UsageError("--scaling tf applies to --scheme mxfp4 only")
    t = _read(fio.read_tsr, args.input)
    if t.ndim == 1:
        t = t.reshape(1, -1)
    if t.ndim != 2:
        raise DataError(f"{args.input}: expected a 1-D or 2-D tensor, got {t.ndim} dimensions")
    try:
        q = quantize_tensor(t, args.scheme, args.axis, args.rounding, scaling, args.seed, args.tensor_id)
    except ValueError as exc:  # non-finite entries, zero-size tensors
        raise DataError(f"{args.input}: {exc}") from None
    fio.write_qtz(args.output, q)
    deq = q.dequantize()
    ref = t.astype(np.float64)
    report = {
        "scheme": q.scheme,
        "shape": [q.rows, q.cols],
        "blocks": q.n_blocks,
        "bits_per_value": q.bits_per_value(),
        "relative_rms_error": relative_rms_error(ref, deq),
        "max_abs_error": float(np.max(np.abs(ref - deq))),
        "clips": int(q.clips),
    }
    _emit(report, args.format)
    return EXIT_OK


def cmd_dequantize(args) -> int:
    q = _read(fio.read_qtz, args.input)
    fio.write_tsr(args.output, q.dequantize(np.float32))
    return EXIT_OK


def _emit(report: dict, fmt: str) -> None:
    if fmt == "json":
        print(json.dumps(report, sort_keys=True))
    else:
        for k, v in report.items():
            print(f"{k}: {v}")


# ── training ─────────────────────────────────────────────────────


def _load_train_config(args):
    from .trainkit.config import ConfigError, load_config

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        if "cannot read config" in str(exc):
            raise DataError(str(exc)) from None
        raise UsageError(f"{args.config}: {exc}") from None
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _load_corpus_checked(cfg):
    from .trainkit.data import load_corpus

    try:
        load_corpus(cfg.data)
    except OSError as exc:
        raise DataError(f"corpus {cfg.data.corpus}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None


def cmd_train(args) -> int:
    from .trainkit.runner import manifest, metrics_csv, train

    cfg = _load_train_config(args)
    if cfg.run.steps:
        _load_corpus_checked(cfg)
    out = Path(args.out_dir)
    m = train(cfg)
    _write_text(out / "metrics.csv", metrics_csv(m))
    _write_text(out / "manifest.json", json.dumps(manifest(m), indent=2, sort_keys=True) + "\n")
    last = f"{m.final_loss:.4f}" if m.losses else "n/a"
    print(f"steps: {m.steps}  tokens: {m.tokens_seen}  final_loss: {last}  wall_time_s: {m.wall_time:.1f}",
          file=sys.stderr)
    if m.diverged:
        print(f"diverged at step {m.divergence[0]['step']}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainkit.runner import ablate, ablation_csv

    cfg = _load_train_config(args)
    if cfg.run.steps == 0:
        raise UsageError("ablation needs run.steps > 0: relative error is undefined on an empty window")
    _load_corpus_checked(cfg)
    baseline, cells = ablate(cfg, args.scheme, jobs=args.jobs)
    text = ablation_csv(cells)
    if args.output:
        _write_text(args.output, text)
    else:
        sys.stdout.write(text)
    return EXIT_DIVERGED if baseline.diverged else EXIT_OK


def cmd_benchmark(args) -> int:
    from .trainkit.benchmark import benchmark_config, run_benchmark

    base = benchmark_config(args.steps, batch=args.batch)
    res = run_benchmark(base, args.seeds, jobs=args.jobs)
    text = res.to_csv()
    if args.output:
        _write_text(args.output, text)
    else:
        sys.stdout.write(text)
    summary = dict(res.orderings())
    summary["tokens"] = res.tokens()
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return EXIT_DIVERGED if not summary["d_no_divergence_recommended"] else EXIT_OK


# ── analytical reports ───────────────────────────────────────────


def cmd_analyze(args) -> int:
    if args.table1 is None and not args.model and not args.preset:
        raise UsageError("analyze needs --table1, --model or --preset")
    dims = None
    if args.table1 is not None:
        if len(args.table1) not in (4, 5):
            raise UsageError("--table1 takes M N K r [j]")
        try:
            dims = cm.GemmDims(*args.table1)
        except ValueError as exc:
            raise UsageError(f"--table1: {exc}") from None
    specs = []
    for path in args.model or ():
        try:
            specs.append(cm.load_model_spec(path))
        except OSError as exc:
            raise DataError(f"{path}: {exc.strerror or exc}") from None
        except Exception as exc:  # configparser errors and field validation
            raise UsageError(f"{path}: {exc}") from None
    for name in args.preset or ():
        if name not in cm.PRESETS:
            raise UsageError(f"unknown preset {name!r}; choose from {', '.join(cm.PRESETS)}")
        specs.append(cm.PRESETS[name])
    if args.format == "json":
        sys.stdout.write(cm.report_json(specs, dims, args.claimed_active))
        return EXIT_OK
    if dims is not None:
        print("# extra compute beyond FP4 GEMM and quantization (element ops)")
        sys.stdout.write(cm.table1_csv(dims))
    if specs:
        print("# percent of parameters in FP4 per component")
        sys.stdout.write(cm.table2_csv(specs))
        for spec in specs:
            if spec.is_moe:
                act = cm.moe_active_fraction(spec, args.claimed_active)
                print(f"# {spec.name}: active experts {act['expert_ratio']} = {act['expert_fraction']:.4g}%,"
                      f" active params {act['active_param_fraction']:.2f}%,"
                      f" idle FP4 storage {act['inactive_fp4_fraction']:.2f}%")
                if "discrepancy" in act:
                    print(f"# note: {act['discrepancy']}")
    return EXIT_OK


# ── parser ───────────────────────────────────────────────────────


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fp4train", description="MXFP4 / HiF4 quantization and FP4 training tools.")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize a TSR1 tensor into a QTZ1 file")
    q.add_argument("input")
    q.add_argument("-o", "--output", required=True)
    q.add_argument("--scheme", choices=("mxfp4", "hif4"), default="hif4")
    q.add_argument("--rounding", type=_rounding, default=RoundingMode("nearest"),
                   help="nr, sr or sr-additive[:delta] (default nr)")
    q.add_argument("--scaling", choices=("standard", "tf"), default="standard")
    q.add_argument("--axis", choices=("row", "col"), default="row")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--tensor-id", type=int, default=0)
    q.add_argument("--format", choices=("text", "json"), default="text")
    q.set_defaults(func=cmd_quantize)

    d = sub.add_parser("dequantize", help="decode a QTZ1 file back to a TSR1 tensor")
    d.add_argument("input")
    d.add_argument("-o", "--output", required=True)
    d.set_defaults(func=cmd_dequantize)

    t = sub.add_parser("train", help="train a tiny model; writes metrics.csv and manifest.json")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", default=".")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="run the SR/RHT/TF ablation grid for one scheme")
    a.add_argument("--config", required=True)
    a.add_argument("--scheme", choices=("mxfp4", "hif4"), required=True)
    a.add_argument("-o", "--output")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("benchmark", help="standard tiny-dense FP4 vs full-precision comparison")
    b.add_argument("--steps", type=int, default=400)
    b.add_argument("--batch", type=int, default=8)
    b.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    b.add_argument("-o", "--output")
    b.add_argument("--jobs", type=int, default=1)
    b.set_defaults(func=cmd_benchmark)

    z = sub.add_parser("analyze", help="per-GEMM overhead and FP4 parameter-fraction reports")
    z.add_argument("--table1", type=int, nargs="+", metavar="N", help="M N K r [j]")
    z.add_argument("--model", action="append", help="INI file with a [model] section (repeatable)")
    z.add_argument("--preset", action="append", help=f"one of {', '.join(cm.PRESETS)} (repeatable)")
    z.add_argument("--claimed-active", type=float, help="stated active-expert percent to check against")
    z.add_argument("--format", choices=("csv", "json"), default="csv")
    z.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fp4train {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"fp4train {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
