"""Synthetic-easy run: trained vs. untrained selector, oracle bound and random-frame baseline."""

from pathlib import Path

from _common import dump, parse

from atprobe.analysis import oracle_curve, write_curve_csv
from atprobe.experiments import easy_experiment

if __name__ == "__main__":
    args, s = parse(__doc__)
    res = easy_experiment(s)
    out = Path(args.out) / "easy"
    dump(res, out / "results.json")
    val = s.data("easy")["val"]
    write_curve_csv(oracle_curve(val, [1, 2, 4, 8, 16], seed=s.seed), out / "oracle_curve.csv")
