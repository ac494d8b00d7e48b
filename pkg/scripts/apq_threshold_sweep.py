"""Effect of the APQ symmetry threshold on overhead and accuracy.

For each threshold, trains SQ+APQ over a few seeds and reports how many of
the sixteen adaptive feature objects ended up symmetric.
"""

import argparse

import numpy as np

from tsqat.config import ExperimentConfig, QuantSettings
from tsqat.data import load_prepared
from tsqat.runs import train_run
from tsqat.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", required=True)
    ap.add_argument("--thresholds", type=float, nargs="*", default=[0.0, 0.05, 0.1, 0.2, 0.5, 1.0])
    ap.add_argument("--config", help="INI file supplying model/training settings")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=20)
    args = ap.parse_args()

    train, test, norm = load_prepared(args.data)
    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    print(f"{'threshold':>9s} {'rmse':>8s} {'overhead':>9s} {'SQ objects':>10s}")
    for t in args.thresholds:
        rmse, ov, n_sq = [], [], []
        for seed in range(args.seeds):
            training = TrainConfig(**{**vars(base.training), "epochs": args.epochs, "seed": seed,
                                      "apq_threshold": t})
            cfg = ExperimentConfig(model=base.model, training=training, dtype=base.dtype,
                                   quant=QuantSettings(preset="sq+apq", apq_threshold=t))
            s = train_run(cfg, train, test, norm)["summary"]
            rmse.append(s["test_rmse"])
            ov.append(s["overhead"])
            n_sq.append(sum(v == "SQ" for objs in s["resolved_schemes"].values()
                            for o, v in objs.items() if o in ("inputs", "outputs")))
        print(f"{t:9.3f} {np.mean(rmse):8.4f} {np.mean(ov):9.0f} {np.mean(n_sq):10.1f}", flush=True)


if __name__ == "__main__":
    main()
