"""Oracle bound as a function of the number of sampled frames, on a saved dataset."""

import argparse
from pathlib import Path

from atprobe.analysis import oracle_curve, write_curve_csv
from atprobe.embedstore import load_dataset

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("data")
    p.add_argument("--split", default="val")
    p.add_argument("--ns", default="1,2,4,8,16")
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--out", default="oracle_curve.csv")
    a = p.parse_args()
    rows = oracle_curve(load_dataset(a.data)[a.split], [int(n) for n in a.ns.split(",")], a.samples)
    write_curve_csv(rows, Path(a.out))
    for r in rows:
        print(f"n={r['n']:>3}  {r['mean_accuracy']:.4f} +/- {r['stderr']:.4f}")
