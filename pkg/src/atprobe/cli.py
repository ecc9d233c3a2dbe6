"""Command-line entry points: ``atprobe <command> [--config run.json] [flags]``.

Settings resolve as built-in defaults < JSON config file < explicit flags. The
resolved settings are written to ``<out>/run_config.json`` before any work.

Exit codes: 0 success, 2 config error, 3 data validation error, 4 numerical
failure. Failures also print one JSON object on stderr (and to
``<out>/error.json`` when the output directory exists).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .analysis import (crossfit_hard_mask, ensemble_report, extract_hard_subset, fit_hardness_rule,
                       oracle_curve, read_report, subset_precision_recall, train_ensemble, write_curve_csv)
from .checkpoint import CHECKPOINT_VERSION
from .embedstore import (FORMAT_VERSION, MULTI_FRAME, PRESETS, DataValidationError, ingest, load_dataset,
                         make_synthetic, save_dataset, synth_easy)
from .selector import ATPConfig, ATPSelector
from .tasks import write_metrics
from .temporal import (TemporalConfig, crossfit_route, fit_routing_threshold, load_temporal,
                       predict_temporal, routed_eval, save_temporal, train_temporal)
from .trainer import (AdamState, NumericalError, TrainSchedule, TrainState, collate_qa, evaluate, grad_check,
                      load_selector, params_digest, save_train_state, train_atp)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# Options
# --------------------------------------------------------------------------

_ATP = {f.name: f.default for f in fields(ATPConfig)}
_TEMP = {f.name: f.default for f in fields(TemporalConfig)}

COMMON = {"seed": 0, "out": None}
DATA = {"data": None, "split": "train"}
SCHEDULE = {"epochs": 20, "steps": None, "lr": 1e-4, "batch_size": 128}
ATP_OPTS = {k: v for k, v in _ATP.items() if k != "seed"}
TEMP_OPTS = {k: v for k, v in _TEMP.items() if k not in ("seed", "uses_positional_encodings")}

COMMANDS: dict[str, dict] = {
    "synth-gen": {**COMMON, "preset": "mixed", "n_train": 2000, "n_val": 500, "frames": 16, "m": 5,
                  "dim": 64, "noise": 0.3},
    "ingest": {**COMMON, "src": None},
    "train": {**COMMON, **DATA, **ATP_OPTS, **SCHEDULE, "eval_split": "val"},
    "eval": {**COMMON, **DATA, "split": "val", "checkpoint": None, "n_frames": None},
    "oracle": {**COMMON, **DATA, "split": "val", "ns": "1,2,4,8,16", "num_samples": 20},
    "ensemble": {**COMMON, **DATA, **ATP_OPTS, **SCHEDULE, "E": 5, "seeds": None, "report_splits": "train,val"},
    "hard-subset": {**COMMON, **DATA, "split": "val", "report": None, "k_folds": 5, "min_recall": 0.9,
                    "crossfit": True},
    "temporal": {**COMMON, **DATA, **TEMP_OPTS, **SCHEDULE, "atp": None, "eval_split": "val"},
    "route": {**COMMON, **DATA, "split": "val", "fit_split": None, "ensemble_dir": None, "atp": None,
              "temporal": None, "k_folds": 5},
    "gradcheck": {**COMMON, "d_model": 16, "n_layers": 1, "n_heads": 1, "epsilon": 1e-6,
                  "num_params": 200, "dim": 16, "frames": 6, "batch": 8, "threshold": 1e-3},
}

HELP = {
    "synth-gen": "write a synthetic dataset (easy / hard / mixed / retrieval)",
    "ingest": "normalize externally computed embeddings into a dataset",
    "train": "train a selector; writes checkpoint.bin, curve.csv, metrics.json",
    "eval": "evaluate a selector checkpoint",
    "oracle": "oracle-bound curve over n",
    "ensemble": "train E selectors and write per-instance reports",
    "hard-subset": "fit the hardness rule and extract the hard subset",
    "temporal": "train Temp[ATP] on a frozen selector",
    "route": "confidence-routed ensemble of ATP and Temp[ATP]",
    "gradcheck": "backprop vs finite differences on a tiny selector",
}


OPTIONAL_INTS = {"steps", "n_frames"}


def _flag_type(key, default):
    if key in OPTIONAL_INTS:
        return int
    if isinstance(default, bool):
        return lambda s: s.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atprobe", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        sp = sub.add_parser(name, help=HELP[name])
        sp.add_argument("--config", default=argparse.SUPPRESS, help="JSON file of settings; flags win")
        for key, default in opts.items():
            sp.add_argument("--" + key.replace("_", "-"), dest=key, type=_flag_type(key, default),
                            default=argparse.SUPPRESS, help=f"(default: {default})")
    return p


def resolve(command: str, args: dict) -> dict:
    """Defaults < config file < flags."""
    cfg = dict(COMMANDS[command])
    path = args.pop("config", None)
    if path is not None:
        try:
            file_cfg = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        unknown = sorted(set(file_cfg) - set(cfg) - {"command"})
        if unknown:
            raise ConfigError(f"unknown settings for {command}: {unknown}")
        file_cfg.pop("command", None)
        cfg.update(file_cfg)
    cfg.update(args)
    if cfg.get("data") is None and "data" in cfg:
        cfg["data"] = os.environ.get("ATP_DATA_ROOT")
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError("missing required settings: " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x)}")


def _atp_config(cfg: dict, seed: int | None = None) -> ATPConfig:
    try:
        return ATPConfig(**{k: cfg[k] for k in ATP_OPTS}, seed=cfg["seed"] if seed is None else seed)
    except ValueError as e:
        raise ConfigError(str(e))


def _schedule(cfg: dict, n: int) -> TrainSchedule:
    try:
        if cfg["steps"] is not None:
            return TrainSchedule(total_steps=cfg["steps"], lr=cfg["lr"], batch_size=cfg["batch_size"])
        return TrainSchedule.for_epochs(n, cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"])
    except ValueError as e:
        raise ConfigError(str(e))


def _split(ds, name: str):
    if name not in ds.splits:
        raise ConfigError(f"split {name!r} not in dataset (have {sorted(ds.splits)})")
    return ds[name]


def _load(cfg: dict):
    _require(cfg, "data")
    return load_dataset(cfg["data"])


def _checkpoint(path) -> ATPSelector:
    if path is None or not Path(path).is_file():
        raise DataValidationError("checkpoint not found", path)
    return load_selector(path)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_synth_gen(cfg: dict, out: Path) -> dict:
    if cfg["preset"] not in PRESETS:
        raise ConfigError(f"preset must be one of {PRESETS}")
    try:
        ds = make_synthetic(cfg["preset"], cfg["n_train"], cfg["n_val"], cfg["frames"], cfg["m"], cfg["dim"],
                            cfg["noise"], cfg["seed"])
    except ValueError as e:
        raise ConfigError(str(e))
    m = save_dataset(ds, out)
    return {"splits": {s.name: s.instance_count for s in m.splits}}


def cmd_ingest(cfg: dict, out: Path) -> dict:
    _require(cfg, "src")
    ds = ingest(cfg["src"], out)
    return {"splits": {k: len(v) for k, v in ds.splits.items()}}


def _write_curve(history: list[dict], path: Path) -> None:
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["step", "loss", "tau", "beta"], extrasaction="ignore")
        w.writeheader()
        w.writerows(history)


def cmd_train(cfg: dict, out: Path) -> dict:
    acfg = _atp_config(cfg)
    ds = _load(cfg)
    split = _split(ds, cfg["split"])
    sched = _schedule(cfg, len(split))
    state = train_atp(split, acfg, sched, dim=ds.dim, checkpoint_path=out / "checkpoint.bin")
    _write_curve(state.history, out / "curve.csv")
    res = {"steps": state.step, "params_sha256": params_digest(state.model),
           "final_loss": state.history[-1]["loss"] if state.history else None}
    if cfg["eval_split"] in ds.splits:
        res["eval"] = evaluate(ds[cfg["eval_split"]], state.model, seed=cfg["seed"])
    _write_json(out / "metrics.json", res)
    return res


def cmd_eval(cfg: dict, out: Path) -> dict:
    ds = _load(cfg)
    model = _checkpoint(cfg["checkpoint"])
    report = evaluate(_split(ds, cfg["split"]), model, cfg["n_frames"], seed=cfg["seed"])
    tables = {k: report[k] for k in ("accuracy_by_category", "accuracy_by_hardness") if k in report}
    write_metrics(report, out, tables)
    return report


def cmd_oracle(cfg: dict, out: Path) -> dict:
    ds = _load(cfg)
    try:
        ns = [int(x) for x in str(cfg["ns"]).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--ns must be comma-separated integers, got {cfg['ns']!r}")
    if not ns or min(ns) < 1:
        raise ConfigError("--ns values must be >= 1")
    rows = oracle_curve(_split(ds, cfg["split"]), ns, cfg["num_samples"], cfg["seed"])
    write_curve_csv(rows, out / "oracle_curve.csv")
    _write_json(out / "oracle.json", rows)
    return {"curve": rows}


def cmd_ensemble(cfg: dict, out: Path) -> dict:
    ds = _load(cfg)
    split = _split(ds, cfg["split"])
    E = cfg["E"]
    seeds = ([int(s) for s in str(cfg["seeds"]).split(",")] if cfg["seeds"]
             else [cfg["seed"] + e for e in range(E)])
    if len(seeds) != E:
        raise ConfigError(f"got {len(seeds)} seeds for E={E}")
    try:
        models = train_ensemble(split, _atp_config(cfg), E, seeds, _schedule(cfg, len(split)))
    except ValueError as e:
        raise ConfigError(str(e))
    for e, m in enumerate(models):
        save_train_state(out / f"member_{e}.bin",
                         TrainState(m, AdamState.zeros(list(m.parameters())), np.random.default_rng(seeds[e])))
    summary = {"E": E, "seeds": seeds, "reports": {}}
    for name in [s for s in str(cfg["report_splits"]).split(",") if s]:
        if name not in ds.splits:
            continue
        rep = ensemble_report(models, ds[name], cfg["seed"])
        rep.write_jsonl(out / f"report_{name}.jsonl")
        summary["reports"][name] = {
            "member_accuracy": rep.member_correct.mean(axis=0).tolist(),
            "modal_accuracy": float(np.mean(rep.modal_answer == rep.gt)),
            "mean_confidence_median": float(np.median(rep.mean_confidence)),
        }
    _write_json(out / "summary.json", summary)
    return summary


def cmd_hard_subset(cfg: dict, out: Path) -> dict:
    _require(cfg, "report")
    ds = _load(cfg)
    split = _split(ds, cfg["split"])
    rep = read_report(cfg["report"])
    labels = {x.instance_id: x.hardness_label for x in split.instances}
    if any(i not in labels for i in rep.instance_ids):
        raise DataValidationError("report ids do not match the split", cfg["report"])
    if all(labels[i] is None for i in rep.instance_ids):
        raise DataValidationError("split carries no hardness labels", cfg["data"])
    y = np.array([labels[i] == MULTI_FRAME for i in rep.instance_ids])
    try:
        rule = fit_hardness_rule(rep, y, cfg["k_folds"], cfg["seed"], cfg["min_recall"])
        if cfg["crossfit"]:
            mask, _ = crossfit_hard_mask(rep, y, cfg["k_folds"], cfg["seed"], cfg["min_recall"])
        else:
            ids, _ = extract_hard_subset(rep, rule)
            mask = np.array([i in ids for i in rep.instance_ids])
    except ValueError as e:
        raise ConfigError(str(e))
    ids = [i for i, m in zip(rep.instance_ids, mask) if m]
    pr = subset_precision_recall(mask, y)
    res = {"rule": {"max_correct": rule.max_correct, "c": rule.c, "fold_f1": rule.fold_f1, "cv_f1": rule.cv_f1},
           "crossfit": cfg["crossfit"], **pr}
    _write_json(out / "hard_subset.json", sorted(ids))
    _write_json(out / "precision_recall.json", res)
    return res


def cmd_temporal(cfg: dict, out: Path) -> dict:
    ds = _load(cfg)
    split = _split(ds, cfg["split"])
    atp = _checkpoint(cfg["atp"])
    before = params_digest(atp)
    try:
        tcfg = TemporalConfig(**{k: cfg[k] for k in TEMP_OPTS}, seed=cfg["seed"])
    except ValueError as e:
        raise ConfigError(str(e))
    state = train_temporal(split, atp, tcfg, _schedule(cfg, len(split)), seed=cfg["seed"])
    save_temporal(out / "temporal.bin", state, before)
    res = {"steps": state.step, "frozen_atp_unchanged": params_digest(atp) == before}
    if cfg["eval_split"] in ds.splits:
        ev = predict_temporal(ds[cfg["eval_split"]], atp, state.model, seed=cfg["seed"])
        res["accuracy"] = float(ev.correct.mean())
    _write_json(out / "metrics.json", res)
    return res


def _ensemble_dir(path) -> list[ATPSelector]:
    if path is None or not Path(path).is_dir():
        raise DataValidationError("ensemble directory not found", path)
    members = sorted(Path(path).glob("member_*.bin"), key=lambda p: int(p.stem.split("_")[1]))
    if len(members) < 2:
        raise DataValidationError("ensemble directory holds fewer than 2 members", path)
    return [load_selector(p) for p in members]


def cmd_route(cfg: dict, out: Path) -> dict:
    ds = _load(cfg)
    ensemble = _ensemble_dir(cfg["ensemble_dir"])
    atp = _checkpoint(cfg["atp"]) if cfg["atp"] else ensemble[0]
    if cfg["temporal"] is None or not Path(cfg["temporal"]).is_file():
        raise DataValidationError("temporal checkpoint not found", cfg["temporal"])
    temporal = load_temporal(cfg["temporal"])
    split = _split(ds, cfg["split"])
    if cfg["fit_split"]:
        fit = _split(ds, cfg["fit_split"])
        rule = fit_routing_threshold(ensemble_report(ensemble, fit, cfg["seed"]),
                                     predict_temporal(fit, atp, temporal, seed=cfg["seed"]).predictions,
                                     cfg["k_folds"], cfg["seed"])
        res = {"theta": rule.theta, "fit_split": cfg["fit_split"],
               **routed_eval(split, ensemble, atp, temporal, rule, cfg["seed"])}
    else:
        rep = ensemble_report(ensemble, split, cfg["seed"])
        tpred = predict_temporal(split, atp, temporal, seed=cfg["seed"]).predictions
        res, _ = crossfit_route(rep, tpred, cfg["k_folds"], cfg["seed"])
        res["crossfit"] = True
    _write_json(out / "routing.json", res)
    return res


def cmd_gradcheck(cfg: dict, out: Path) -> dict:
    try:
        acfg = ATPConfig(n_frames=cfg["frames"], d_model=cfg["d_model"], n_layers=cfg["n_layers"],
                         n_heads=cfg["n_heads"], ff_hidden=cfg["d_model"], mlp_hidden=cfg["d_model"],
                         seed=cfg["seed"])
    except ValueError as e:
        raise ConfigError(str(e))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # a tiny selector trips the capacity warning by construction
        model = ATPSelector(cfg["dim"], acfg).double()
    split = synth_easy(cfg["batch"], cfg["frames"], 5, cfg["dim"], rng_seed=cfg["seed"])
    batch = collate_qa(split, list(range(cfg["batch"])), cfg["frames"], np.random.default_rng(cfg["seed"]),
                       "question", dtype=torch.float64)
    res = grad_check(model, batch, cfg["epsilon"], cfg["num_params"], cfg["seed"])
    res.pop("entries")
    if not np.isfinite(res["max_rel_error"]):
        raise NumericalError("non-finite gradient check result")
    res["passed"] = res["max_rel_error"] < cfg["threshold"]
    _write_json(out / "gradcheck.json", res)
    return res


HANDLERS = {
    "synth-gen": cmd_synth_gen, "ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval,
    "oracle": cmd_oracle, "ensemble": cmd_ensemble, "hard-subset": cmd_hard_subset,
    "temporal": cmd_temporal, "route": cmd_route, "gradcheck": cmd_gradcheck,
}


def _fail(code: int, err: BaseException, out: Path | None) -> int:
    payload = {"error": type(err).__name__, "message": str(err), "exit_code": code}
    path = getattr(err, "path", None)
    if path is not None:
        payload["path"] = str(path)
    record = getattr(err, "record", None)
    if record is not None:
        payload["record"] = record
    print(json.dumps(payload), file=sys.stderr)
    if out is not None and out.is_dir():
        _write_json(out / "error.json", payload)
    return code


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)  # bitwise determinism
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    args = vars(ns)
    command = args.pop("command")
    out = None
    try:
        cfg = resolve(command, args)
        _require(cfg, "out")
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "run_config.json", {
            "command": command, "settings": cfg, "package_version": __version__,
            "dataset_format_version": FORMAT_VERSION, "checkpoint_version": CHECKPOINT_VERSION,
        })
        result = HANDLERS[command](cfg, out)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, e, out)
    except (DataValidationError, FileNotFoundError) as e:
        return _fail(EXIT_DATA, e, out)
    except (NumericalError, FloatingPointError) as e:
        return _fail(EXIT_NUMERIC, e, out)
    print(json.dumps(result, default=_jsonable, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
