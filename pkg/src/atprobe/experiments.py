"""Desk-scale synthetic experiments shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .analysis import (crossfit_hard_mask, ensemble_report, fit_hardness_rule, oracle_bound,
                       random_frame_accuracy, subset_precision_recall, train_ensemble)
from .embedstore import MULTI_FRAME, Dataset, make_synthetic
from .selector import ATPConfig, ATPSelector
from .temporal import TemporalConfig, crossfit_route, predict_temporal, train_temporal
from .trainer import TrainSchedule, evaluate, params_digest, train_atp

N_TRAIN, N_VAL = 2000, 500


@dataclass
class ExperimentSettings:
    n_train: int = N_TRAIN
    n_val: int = N_VAL
    frames: int = 16
    dim: int = 64
    m: int = 5
    noise: float = 0.3
    seed: int = 0
    atp: ATPConfig = field(default_factory=ATPConfig)
    epochs: int = 20
    lr: float = 1e-4
    # the 50/50 mix needs a longer run before easy items are solved reliably
    mixed_epochs: int = 40
    mixed_lr: float = 3e-4
    ensemble_size: int = 5
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    temporal_epochs: int = 20
    temporal_lr: float = 1e-4
    k_folds: int = 5
    # operating point for hard-subset mining: F1 is maximized among rules at this recall
    min_recall: float = 0.9

    def schedule(self, n: int, mixed: bool = False) -> TrainSchedule:
        if mixed:
            return TrainSchedule.for_epochs(n, self.mixed_epochs, lr=self.mixed_lr)
        return TrainSchedule.for_epochs(n, self.epochs, lr=self.lr)

    def data(self, preset: str, seed_offset: int = 0) -> Dataset:
        return make_synthetic(preset, self.n_train, self.n_val, self.frames, self.m, self.dim, self.noise,
                              self.seed + seed_offset)


def easy_experiment(s: ExperimentSettings | None = None) -> dict:
    s = s or ExperimentSettings()
    t0 = time.perf_counter()
    ds = s.data("easy")
    dim = ds.dim
    untrained = ATPSelector(dim, s.atp)
    state = train_atp(ds["train"], s.atp, s.schedule(s.n_train))
    val = ds["val"]
    out = {
        "untrained_accuracy": evaluate(val, untrained)["accuracy"],
        "trained_accuracy": evaluate(val, state.model)["accuracy"],
        "oracle_bound": oracle_bound(val, s.frames)["mean_accuracy"],
        "random_frame_accuracy": random_frame_accuracy(val, s.frames),
        "initial_loss": state.history[0]["loss"],
        "final_loss": float(np.mean([h["loss"] for h in state.history[-10:]])),
    }
    out["expected_untrained_accuracy"] = 1 / s.frames + (1 - 1 / s.frames) / s.m
    out["seconds"] = time.perf_counter() - t0
    out["model"] = state.model
    return out


def mixed_experiment(s: ExperimentSettings | None = None) -> dict:
    """Ensemble mining and confidence routing on a 50/50 easy/hard mix.

    Members are trained on the train split, so their in-sample reports are
    near-perfect and carry no signal about hardness. Thresholds are instead
    cross-fitted on held-out reports: each val fold is scored with a rule fitted
    on the other folds only.
    """
    s = s or ExperimentSettings()
    t0 = time.perf_counter()
    ds = s.data("mixed", seed_offset=2)
    train, val = ds["train"], ds["val"]
    seeds = [s.seed + 100 + e for e in range(s.ensemble_size)]
    ensemble = train_ensemble(train, s.atp, s.ensemble_size, seeds, s.schedule(s.n_train, mixed=True))
    val_rep = ensemble_report(ensemble, val)
    y_val = np.array([x.hardness_label == MULTI_FRAME for x in val.instances])

    mask, rules = crossfit_hard_mask(val_rep, y_val, s.k_folds, s.seed, s.min_recall)
    pr = subset_precision_recall(mask, y_val)
    rule = fit_hardness_rule(val_rep, y_val, s.k_folds, s.seed, s.min_recall)

    frozen = ensemble[0]
    digest = params_digest(frozen)
    sched = TrainSchedule.for_epochs(s.n_train, s.temporal_epochs, lr=s.temporal_lr)
    temporal = train_temporal(train, frozen, s.temporal, sched).model
    tval = predict_temporal(val, frozen, temporal)
    routed, rrules = crossfit_route(val_rep, tval.predictions, s.k_folds, s.seed)

    return {
        "ensemble": ensemble,
        "temporal": temporal,
        "report": val_rep,
        "frozen_atp_unchanged": digest == params_digest(frozen),
        "member_val_accuracy": [float(val_rep.member_correct[:, e].mean()) for e in range(s.ensemble_size)],
        "hardness_rule": rule,
        "fold_rules": [(r.max_correct, r.c) for r in rules],
        "hard_subset": {**pr, "fraction": float(mask.mean())},
        "mean_confidence_easy_median": float(np.median(val_rep.mean_confidence[~y_val])),
        "mean_confidence_hard_median": float(np.median(val_rep.mean_confidence[y_val])),
        "routing": routed,
        "seconds": time.perf_counter() - t0,
    }


def hard_experiment(frozen_atp: ATPSelector, s: ExperimentSettings | None = None) -> dict:
    """ATP alone vs. Temp[ATP] on order-dependent questions.

    ``frozen_atp`` is the partition selector. A selector trained on synth-hard
    alone learns to avoid event frames, since each one gives a confidently wrong
    answer half the time, so the caller passes one trained on the mix.
    """
    s = s or ExperimentSettings()
    t0 = time.perf_counter()
    ds = s.data("hard", seed_offset=1)
    train, val = ds["train"], ds["val"]
    atp = train_atp(train, s.atp, s.schedule(s.n_train)).model
    digest = params_digest(frozen_atp)
    sched = TrainSchedule.for_epochs(s.n_train, s.temporal_epochs, lr=s.temporal_lr)
    state = train_temporal(train, frozen_atp, s.temporal, sched)
    tval = predict_temporal(val, frozen_atp, state.model)
    return {
        "atp_accuracy": evaluate(val, atp)["accuracy"],
        "frozen_atp_accuracy": evaluate(val, frozen_atp)["accuracy"],
        "temporal_accuracy": float(tval.correct.mean()),
        "frozen_atp_unchanged": digest == params_digest(frozen_atp),
        "temporal": state.model,
        "seconds": time.perf_counter() - t0,
    }
