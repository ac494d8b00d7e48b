"""Size and overhead of uniform and mixed bit-width configurations.

No training is involved: every number follows from the model shape and the
quantisation configuration. Pass ``--data`` to also run the per-layer
sensitivity sweep (each layer in turn at ``--victim-bits``).
"""

import argparse

from tsqat.analysis import model_size, total_overhead
from tsqat.cli import main as cli_main
from tsqat.model import LAYER_IDS, ModelConfig, make_preset


def size_table(cfg: ModelConfig, preset: str, low: int, high: int):
    print(f"{'configuration':24s} {'bytes':>8s} {'KB':>8s} {'ratio':>7s} {'overhead':>9s}")
    variants = [(f"uniform {high}-bit", make_preset(preset, high)),
                (f"uniform {low}-bit", make_preset(preset, low))]
    variants += [(f"{low}-bit, {lid} at {high}", make_preset(preset, low, layer_bits={lid: high}))
                 for lid in LAYER_IDS]
    for name, qc in variants:
        size = model_size(cfg, qc)
        ov = total_overhead(cfg, qc).total
        print(f"{name:24s} {size.packed_bytes:8d} {size.packed_kb:8.2f} {size.ratio:6.3f}x {ov:9d}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="all-sq", choices=("all-aq", "all-sq", "sq+aq"))
    ap.add_argument("--low", type=int, default=4)
    ap.add_argument("--high", type=int, default=8)
    ap.add_argument("--data", help="prepared dataset; enables the training sweep")
    ap.add_argument("--config")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    size_table(ModelConfig(), args.preset, args.low, args.high)
    if args.data:
        argv = ["ablate", "--data", args.data, "--preset", args.preset, "--bits", str(args.high),
                "--victim-bits", str(args.low), "--epochs", str(args.epochs), "--out", args.out]
        if args.config:
            argv += ["--config", args.config]
        raise SystemExit(cli_main(argv))


if __name__ == "__main__":
    main()
