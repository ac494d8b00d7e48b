"""Train float and the four quantisation presets over several seeds.

Prints mean/std test RMSE, zero-point overhead and packed size per
configuration, and writes the per-seed numbers to ``<out>/compare.csv``.

    python scripts/compare_configs.py --data data/prepared.npz --seeds 10 --epochs 100 --out runs/compare
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from tsqat.config import ExperimentConfig, QuantSettings
from tsqat.data import load_prepared
from tsqat.runs import train_run
from tsqat.training import TrainConfig

CONFIGS = ("float", "all-aq", "all-sq", "sq+aq", "sq+apq")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", required=True)
    ap.add_argument("--config", help="INI file supplying model/training settings")
    ap.add_argument("--configs", nargs="*", default=list(CONFIGS), choices=CONFIGS)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--bits", type=int, default=8)
    ap.add_argument("--dtype", choices=("float64", "float32"))
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    train, test, norm = load_prepared(args.data)
    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.epochs:
        base.training.epochs = args.epochs
    if args.dtype:
        base.dtype = args.dtype
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for preset in args.configs:
        for seed in range(args.seeds):
            cfg = ExperimentConfig(model=base.model, dtype=base.dtype,
                                   training=TrainConfig(**{**vars(base.training), "seed": seed}),
                                   quant=QuantSettings(preset=preset, bits=args.bits,
                                                       apq_threshold=base.quant.apq_threshold))
            s = train_run(cfg, train, test, norm)["summary"]
            rows.append([preset, seed, s["test_rmse"], s["overhead"], s["packed_kb"]])
            print(f"{preset:7s} seed {seed}: rmse {s['test_rmse']:.4f}  overhead {s['overhead']}", flush=True)

    with (out / "compare.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "seed", "test_rmse", "overhead", "packed_kb"])
        w.writerows(rows)

    print(f"\n{'config':8s} {'rmse mean':>10s} {'std':>7s} {'overhead':>9s} {'size KB':>8s}")
    for preset in args.configs:
        sel = [r for r in rows if r[0] == preset]
        r = np.array([x[2] for x in sel])
        ov = np.mean([x[3] for x in sel])
        print(f"{preset:8s} {r.mean():10.4f} {r.std():7.4f} {ov:9.0f} {sel[0][4]:8.2f}")


if __name__ == "__main__":
    main()
