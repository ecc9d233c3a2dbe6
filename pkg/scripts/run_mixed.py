"""Mixed easy/hard run: ensemble hard-subset mining, then confidence routing with Temp[ATP]."""

from pathlib import Path

from _common import dump, parse

from atprobe.experiments import hard_experiment, mixed_experiment

if __name__ == "__main__":
    args, s = parse(__doc__)
    out = Path(args.out)
    res = mixed_experiment(s)
    (out / "mixed").mkdir(parents=True, exist_ok=True)
    res["report"].write_jsonl(out / "mixed" / "ensemble_report_val.jsonl")
    dump(res, out / "mixed" / "results.json")
    # the hard-only comparison reuses the first mixed-trained member as its frozen selector
    dump(hard_experiment(res["ensemble"][0], s), out / "hard" / "results.json")
