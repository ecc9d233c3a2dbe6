"""Shared helpers for the experiment scripts."""

import argparse
import json
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np
import torch

from atprobe.experiments import ExperimentSettings


def parse(description: str) -> tuple[argparse.Namespace, ExperimentSettings]:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=500)
    args = p.parse_args()
    torch.set_num_threads(1)
    return args, ExperimentSettings(n_train=args.n_train, n_val=args.n_val, seed=args.seed)


def _plain(o):
    if is_dataclass(o):
        return asdict(o)
    if isinstance(o, (np.generic, np.ndarray)):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def dump(result: dict, path: Path, skip=("ensemble", "temporal", "report")) -> None:
    """Write the JSON-serializable part of an experiment result (models and reports are skipped)."""
    clean = {k: v for k, v in result.items() if k not in skip}
    text = json.dumps(clean, indent=2, sort_keys=True, default=_plain)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n")
    print(text)
