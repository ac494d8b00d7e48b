"""Write a synthetic stand-in for the air-quality series as CSV.

    python scripts/make_synthetic.py --rows 3000 --out data/synthetic.csv
"""

import argparse
from pathlib import Path

from tsqat.data import synthetic_series, write_series


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise", type=float, default=0.05)
    ap.add_argument("--gap-every", type=int, help="drop every k-th row to simulate sensor outages")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    series = synthetic_series(args.rows, seed=args.seed, noise=args.noise, gap_every=args.gap_every)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_series(series, args.out)
    print(f"wrote {len(series)} rows to {args.out}")


if __name__ == "__main__":
    main()
