"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, data, intinfer, packfile, runs
from .config import ExperimentConfig, QuantSettings
from .model import LAYER_IDS, PRESETS, ModelConfig, make_preset
from .quant import QuantError
from .training import TrainingError, evaluate_rmse

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _layer_bits(items) -> dict[str, int]:
    out = {}
    for item in items or []:
        lid, _, bits = item.partition("=")
        if lid not in LAYER_IDS or not bits.isdigit():
            raise UsageError(f"bad --layer-bits entry {item!r}; expected e.g. L8=8")
        out[lid] = int(bits)
    return out


def _experiment(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "preset", None):
        cfg.quant.preset = args.preset
    for name in ("bits",):
        if getattr(args, name, None) is not None:
            setattr(cfg.quant, name, getattr(args, name))
    if getattr(args, "threshold", None) is not None:
        cfg.quant.apq_threshold = cfg.training.apq_threshold = args.threshold
    if getattr(args, "layer_bits", None):
        cfg.quant.layer_bits.update(_layer_bits(args.layer_bits))
    for name in ("seed", "epochs", "patience", "batch_size", "lr"):
        if getattr(args, name, None) is not None:
            setattr(cfg.training, name, getattr(args, name))
    if getattr(args, "dtype", None):
        cfg.dtype = args.dtype
    return cfg


def _load_data(path):
    return data.load_prepared(path)


def cmd_prepare(args) -> int:
    if args.synthetic:
        series = data.synthetic_series(args.synthetic, seed=args.seed)
        if args.input:
            data.write_series(series, args.input)
    elif args.input:
        series = data.read_series(args.input, time_col=args.time_col)
    else:
        raise UsageError("prepare needs --input or --synthetic")
    test_start = args.test_start or None
    if test_start is None and args.test_fraction:
        test_start = float(series.timestamps[int(len(series) * (1 - args.test_fraction))])
    train, test, norm = data.load_and_window(series, args.n, test_start=_time_arg(test_start),
                                             test_end=_time_arg(args.test_end or None))
    data.save_prepared(args.out, train, test, norm)
    print(f"train windows: {len(train)}")
    print(f"test windows : {len(test)}")
    print(f"dropped rows : {series.dropped_rows}")
    return EXIT_OK


def _time_arg(value):
    if value is None:
        return None
    try:
        return float(value)
    except (TypeError, ValueError):
        return value


def _train_args(p):
    p.add_argument("--data", required=True, help="prepared dataset (.npz from `prepare`)")
    p.add_argument("--config", help="INI experiment config")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--bits", type=int)
    p.add_argument("--layer-bits", nargs="*", metavar="Lk=B")
    p.add_argument("--threshold", type=float, help="APQ symmetry threshold")
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dtype", choices=("float64", "float32"))


def _check_dims(cfg: ExperimentConfig, train) -> None:
    n, m = train.X.shape[1:]
    if (cfg.model.n, cfg.model.m) != (n, m):
        cfg.model = ModelConfig(**{**cfg.model.__dict__, "n": n, "m": m})


def cmd_train(args) -> int:
    cfg = _experiment(args)
    train, test, norm = _load_data(args.data)
    _check_dims(cfg, train)
    res = runs.train_run(cfg, train, test, norm, run_dir=args.out, eval_every_epoch=args.track_test)
    print(json.dumps(res["summary"], indent=2, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, model, norm = runs.load_run(args.run)
    _, test, data_norm = _load_data(args.data)
    value = evaluate_rmse(model, test.X, test.y, norm or data_norm)
    print(f"test RMSE: {value:.6f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        mcfg, qs = cfg.model, cfg.quant
    else:
        mcfg = ModelConfig.square(m=args.m, n=args.n, d_model=args.d_model, num_heads=args.heads)
        qs = QuantSettings()
    if args.preset:
        qs.preset = args.preset
    if args.bits is not None:
        qs.bits = args.bits
    qs.layer_bits.update(_layer_bits(args.layer_bits))
    qc = qs.build()
    if qc is not None and qc.has_adaptive():
        raise UsageError("adaptive objects are resolved only by training; analyse a trained run")
    if qc is None:
        qc = make_preset("float")
    over = analysis.total_overhead(mcfg, qc)
    size = analysis.model_size(mcfg, qc)
    print(f"configuration: {qs.preset} ({qs.bits}-bit)")
    print(over.to_table())
    print(f"total zero-point operations: {over.total}")
    print(size.to_table())
    if args.csv:
        out = Path(args.csv)
        out.mkdir(parents=True, exist_ok=True)
        (out / "overhead.csv").write_text(over.to_csv())
        (out / "size.csv").write_text(size.to_csv())
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _experiment(args)
    train, test, norm = _load_data(args.data)
    _check_dims(base, train)
    out = Path(args.out)
    layers = args.layers or list(LAYER_IDS)
    rmse_of = {}

    def run(tag, layer_bits):
        cfg = ExperimentConfig.from_ini(base.to_ini())
        cfg.quant.layer_bits = {**cfg.quant.layer_bits, **layer_bits}
        res = runs.train_run(cfg, train, test, norm, run_dir=out / tag)
        rmse_of[tag] = res["summary"]["test_rmse"]
        return rmse_of[tag]

    baseline = run("baseline", {})
    rows = [analysis.AblationResult(lid, args.victim_bits, run(lid, {lid: args.victim_bits}), baseline)
            for lid in layers]
    lines = ["layer,bits,rmse,baseline_rmse,delta"]
    print(f"baseline ({base.quant.bits}-bit) RMSE: {baseline:.4f}")
    for r in rows:
        print(f"{r.layer}: {r.bits}-bit RMSE {r.rmse:.4f} (delta {r.delta:+.4f})")
        lines.append(f"{r.layer},{r.bits},{r.rmse!r},{r.baseline_rmse!r},{r.delta!r}")
    print(f"most sensitive layer: {analysis.most_sensitive(rows)}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_export(args) -> int:
    _, model, _ = runs.load_run(args.run)
    packed = intinfer.freeze(model)
    size = packfile.save_packed(args.out, packed)
    report = analysis.model_size(model.config, model.qconfig)
    print(f"wrote {args.out}: {size} bytes on disk, payload {report.packed_bytes} bytes "
          f"({report.packed_kb:.2f} KB)")
    return EXIT_OK


def cmd_infer(args) -> int:
    packed = packfile.load_packed(args.packed)
    _, test, norm = _load_data(args.data)
    pred = np.concatenate([intinfer.int_forward(packed, test.X[i:i + 512])
                           for i in range(0, len(test), 512)])
    if args.run:
        _, model, run_norm = runs.load_run(args.run)
        norm = run_norm or norm
        cons = intinfer.consistency_check(model, packed, test.X)
        print(f"max |int - fake-quant|: {cons.max_abs:.3e}")
        print(f"rms |int - fake-quant|: {cons.rmse:.3e}")
    value = evaluate_rmse(None, test.X, test.y, norm, predictions=pred)
    print(f"integer-path test RMSE: {value:.6f}")
    if args.predictions:
        np.savetxt(args.predictions, norm.inverse_transform(pred, -1), delimiter=",")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = _experiment(args)
    train, test, norm = _load_data(args.data)
    _check_dims(base, train)
    out = Path(args.out)
    results = []
    for seed in range(args.first_seed, args.first_seed + args.seeds):
        cfg = ExperimentConfig.from_ini(base.to_ini())
        cfg.training.seed = seed
        s = runs.train_run(cfg, train, test, norm, run_dir=out / f"seed{seed:03d}")["summary"]
        results.append(s)
        print(f"seed {seed}: RMSE {s['test_rmse']:.4f}, overhead {s['overhead']}")
    best = min(results, key=lambda s: s["test_rmse"])
    lean = min(results, key=lambda s: (s["overhead"], s["test_rmse"]))
    with open(out / "sweep.csv", "w") as fh:
        fh.write("seed,test_rmse,overhead\n")
        for s in results:
            fh.write(f"{s['seed']},{s['test_rmse']!r},{s['overhead']}\n")
    print(f"best RMSE     : seed {best['seed']} RMSE {best['test_rmse']:.4f} overhead {best['overhead']}")
    print(f"least overhead: seed {lean['seed']} RMSE {lean['test_rmse']:.4f} overhead {lean['overhead']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tsqat", description="Quantisation-aware training for a time-series Transformer")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="ingest, window, split and normalise a series")
    s.add_argument("--input", help="comma-delimited series with a header row")
    s.add_argument("--synthetic", type=int, metavar="ROWS", help="generate a synthetic series")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=24)
    s.add_argument("--time-col", default="timestamp")
    s.add_argument("--test-start")
    s.add_argument("--test-end")
    s.add_argument("--test-fraction", type=float, default=0.0,
                   help="if no --test-start: hold out this trailing share of rows")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train one configuration and write a run directory")
    _train_args(s)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--track-test", action="store_true", help="log test RMSE every epoch")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="test RMSE of a run's checkpoint")
    s.add_argument("--run", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("analyze", help="zero-point overhead and model size (no training)")
    s.add_argument("--config")
    s.add_argument("--preset", choices=PRESETS)
    s.add_argument("--bits", type=int)
    s.add_argument("--layer-bits", nargs="*", metavar="Lk=B")
    s.add_argument("--m", type=int, default=7)
    s.add_argument("--n", type=int, default=24)
    s.add_argument("--d-model", type=int, default=64)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--csv", metavar="DIR", help="also write overhead.csv and size.csv here")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("ablate", help="per-layer bit-width sensitivity sweep")
    _train_args(s)
    s.add_argument("--seed", type=int)
    s.add_argument("--victim-bits", type=int, default=4)
    s.add_argument("--layers", nargs="*", choices=LAYER_IDS)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("export", help="freeze a run and write the packed model file")
    s.add_argument("--run", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("infer", help="integer inference over a prepared test set")
    s.add_argument("--packed", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--run", help="checkpoint to compare the integer path against")
    s.add_argument("--predictions", help="write de-normalised predictions (CSV)")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("sweep", help="repeat training over seeds; report the extreme runs")
    _train_args(s)
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--first-seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tsqat: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DataError, packfile.PackFormatError, intinfer.ProvenanceError,
            FileNotFoundError) as exc:
        print(f"tsqat: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, QuantError, FloatingPointError) as exc:
        print(f"tsqat: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
