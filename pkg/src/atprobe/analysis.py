"""Oracle bounds, selector ensembles and hard-subset mining."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedstore import MULTI_FRAME, Split, kfold_split
from .selector import ATPConfig, ATPSelector, sample_frames
from .trainer import TrainSchedule, predict_qa, train_atp


# --------------------------------------------------------------------------
# Oracle bound
# --------------------------------------------------------------------------


def frame_correctness(split: Split) -> list[np.ndarray]:
    """For each instance, whether each frame (temporal order) alone answers correctly."""
    out = []
    for inst in split.instances:
        frames = split.video_of(inst).frames.astype(np.float64)
        scores = frames @ inst.candidates.astype(np.float64).T
        out.append(np.argmax(scores, axis=1) == inst.gt_index)
    return out


def oracle_bound(split: Split, n: int, num_samples: int = 20, seed: int = 0) -> dict:
    """Accuracy when the best of ``n`` sampled frames is always chosen.

    An instance counts as correct for a sample if any sampled frame answers it.
    When ``n`` covers every video, a single exhaustive sample is used.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(split) == 0:
        raise ValueError("empty split")
    correct = frame_correctness(split)
    exhaustive = all(len(c) <= n for c in correct)
    S = 1 if exhaustive else num_samples
    rng = np.random.default_rng(seed)
    per_sample = np.zeros(S)
    for s in range(S):
        hits = 0
        for inst, c in zip(split.instances, correct):
            if len(c) <= n:
                hits += bool(c.any())
            else:
                _, idx = sample_frames(split.video_of(inst), n, rng)
                hits += bool(c[idx].any())
        per_sample[s] = hits / len(correct)
    stderr = float(per_sample.std(ddof=1) / math.sqrt(S)) if S > 1 else 0.0
    return {"n": n, "mean_accuracy": float(per_sample.mean()), "stderr": stderr, "num_samples": S}


def oracle_bound_exhaustive(split: Split, n: int) -> float:
    """Oracle accuracy averaged over every size-``n`` frame subset (closed form)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    vals = []
    for c in frame_correctness(split):
        T, good = len(c), int(c.sum())
        k = min(n, T)
        vals.append(1.0 - math.comb(T - good, k) / math.comb(T, k))
    return float(np.mean(vals))


def oracle_curve(split: Split, ns: Sequence[int], num_samples: int = 20, seed: int = 0) -> list[dict]:
    return [oracle_bound(split, n, num_samples, seed) for n in ns]


def random_frame_accuracy(split: Split, n: int, num_samples: int = 20, seed: int = 0) -> float:
    """Expected accuracy of answering from one uniformly random frame out of ``n`` sampled."""
    correct = frame_correctness(split)
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(num_samples):
        for inst, c in zip(split.instances, correct):
            _, idx = sample_frames(split.video_of(inst), min(n, len(c)), rng)
            vals.append(c[idx].mean())
    return float(np.mean(vals))


def write_curve_csv(rows: list[dict], path) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["n", "mean_accuracy", "stderr"], extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------------------
# Ensembles
# --------------------------------------------------------------------------


def train_ensemble(split: Split, config: ATPConfig, E: int = 5, seeds: Sequence[int] | None = None,
                   schedule: TrainSchedule | None = None) -> list[ATPSelector]:
    """Train ``E`` selectors that differ only in seed (initialization and frame sampling)."""
    seeds = list(seeds) if seeds is not None else list(range(E))
    if E < 2 or len(seeds) != E:
        raise ValueError("need E >= 2 and exactly E seeds")
    if len(set(seeds)) < E:
        warnings.warn("duplicate ensemble seeds give identical members", stacklevel=2)
    schedule = schedule or TrainSchedule.for_epochs(len(split), 20)
    return [train_atp(split, replace(config, seed=s), schedule).model for s in seeds]


@dataclass
class EnsembleReport:
    instance_ids: list[str]
    predictions: np.ndarray  # (N, E)
    member_correct: np.ndarray  # (N, E) bool
    member_confidence: np.ndarray  # (N, E) max softmax probability
    gt: np.ndarray  # (N,)
    modal_answer: np.ndarray = field(init=False)
    agreement: np.ndarray = field(init=False)
    mean_confidence: np.ndarray = field(init=False)

    def __post_init__(self):
        N, E = self.predictions.shape
        if E < 2:
            raise ValueError("an ensemble report needs E >= 2")
        modal, agree = np.empty(N, dtype=int), np.empty(N, dtype=int)
        for i, row in enumerate(self.predictions):
            vals, counts = np.unique(row, return_counts=True)
            j = int(np.argmax(counts))  # ties go to the smallest answer index
            modal[i], agree[i] = vals[j], counts[j]
        self.modal_answer, self.agreement = modal, agree
        self.mean_confidence = self.member_confidence.mean(axis=1)

    @property
    def num_members(self) -> int:
        return self.predictions.shape[1]

    @property
    def num_correct(self) -> np.ndarray:
        return self.member_correct.sum(axis=1)

    def subset(self, idx) -> "EnsembleReport":
        idx = np.asarray(idx)
        return EnsembleReport([self.instance_ids[i] for i in idx], self.predictions[idx],
                              self.member_correct[idx], self.member_confidence[idx], self.gt[idx])

    def records(self) -> list[dict]:
        return [{"id": iid, "gt": int(self.gt[i]), "member_correct": self.member_correct[i].tolist(),
                 "member_confidence": self.member_confidence[i].tolist(),
                 "predictions": self.predictions[i].tolist(), "modal_answer": int(self.modal_answer[i]),
                 "agreement": int(self.agreement[i]), "mean_confidence": float(self.mean_confidence[i])}
                for i, iid in enumerate(self.instance_ids)]

    def write_jsonl(self, path) -> None:
        with Path(path).open("w") as f:
            for r in self.records():
                f.write(json.dumps(r) + "\n")


def read_report(path) -> EnsembleReport:
    """Inverse of :meth:`EnsembleReport.write_jsonl`."""
    recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not recs:
        raise ValueError(f"{path}: empty ensemble report")
    pred = np.array([r["predictions"] for r in recs], dtype=int)
    gt = np.array([r["gt"] for r in recs], dtype=int)
    return EnsembleReport([r["id"] for r in recs], pred, pred == gt[:, None],
                          np.array([r["member_confidence"] for r in recs], dtype=float), gt)


def ensemble_report(ensemble: Sequence[ATPSelector], split: Split, seed: int = 0) -> EnsembleReport:
    """Discrete inference with every member; confidence = max softmax of the QA scores."""
    preds, conf = [], []
    for e, model in enumerate(ensemble):
        res = predict_qa(split, model, seed=seed + e)
        preds.append(res.predictions)
        conf.append(res.confidence())
    P = np.stack(preds, axis=1)
    gt = np.array([x.gt_index for x in split.instances])
    return EnsembleReport([x.instance_id for x in split.instances], P, P == gt[:, None],
                          np.stack(conf, axis=1), gt)


# --------------------------------------------------------------------------
# Hard-subset mining
# --------------------------------------------------------------------------

# dense near 1: member confidences saturate under a 0.07 score temperature
CONFIDENCE_GRID = np.unique(np.round(np.concatenate([
    np.arange(0.05, 1.0, 0.05),
    1.0 - 10.0 ** -np.arange(1.5, 8.01, 0.25),
    [1.0],
]), 12))


@dataclass
class HardnessRule:
    max_correct: int
    c: float
    fold_f1: list[float] = field(default_factory=list)
    cv_f1: float | None = None

    def __post_init__(self):
        if self.max_correct < 0:
            raise ValueError("max_correct must be >= 0")
        if not 0.0 < self.c <= 1.0:
            raise ValueError("confidence cutoff must lie in (0, 1]")


def hard_mask(report: EnsembleReport, rule: HardnessRule) -> np.ndarray:
    return (report.num_correct <= rule.max_correct) & (report.mean_confidence < rule.c)


def extract_hard_subset(report: EnsembleReport, rule: HardnessRule) -> tuple[set[str], dict]:
    """Instances with at most ``max_correct`` correct members and mean confidence below ``c``."""
    mask = hard_mask(report, rule)
    ids = {iid for iid, m in zip(report.instance_ids, mask) if m}
    stats = {"size": int(mask.sum()), "fraction": float(mask.mean()) if len(mask) else 0.0,
             "max_correct": rule.max_correct, "c": rule.c}
    return ids, stats


def f1_score(pred: np.ndarray, truth: np.ndarray) -> float:
    tp = float(np.sum(pred & truth))
    denom = float(pred.sum() + truth.sum())
    return 2 * tp / denom if denom else 0.0


def fit_hardness_rule(report: EnsembleReport, hard_labels: Sequence[bool], k_folds: int = 5,
                      seed: int = 0, min_recall: float = 0.0) -> HardnessRule:
    """Grid-search (max_correct, c) for the best mean F1 over ``k_folds`` folds.

    With ``min_recall`` > 0 only rules whose mean fold recall reaches it are
    eligible (all rules are, if none does). ``cv_f1`` is the nested estimate:
    each fold is scored with the rule chosen on the remaining folds.
    """
    y = np.asarray(hard_labels, dtype=bool)
    if len(y) != len(report.instance_ids):
        raise ValueError("labels and report differ in length")
    if y.all() or not y.any():
        raise ValueError("hardness labels contain a single class")
    E = report.num_members
    rules = [(mc, float(c)) for mc in range(E + 1) for c in CONFIDENCE_GRID]
    folds = kfold_split(len(y), k_folds, seed)
    nc, conf = report.num_correct, report.mean_confidence
    f1 = np.zeros((len(rules), k_folds))
    recall = np.zeros((len(rules), k_folds))
    for r, (mc, c) in enumerate(rules):
        pred = (nc <= mc) & (conf < c)
        for k, fold in enumerate(folds):
            f1[r, k] = f1_score(pred[fold], y[fold])
            pos = y[fold].sum()
            recall[r, k] = (pred[fold] & y[fold]).sum() / pos if pos else 1.0

    def pick(cols) -> int:
        score = f1[:, cols].mean(axis=1)
        ok = recall[:, cols].mean(axis=1) >= min_recall
        return int(np.argmax(np.where(ok, score, -1.0))) if ok.any() else int(np.argmax(score))

    best = pick(np.arange(k_folds))
    nested = [f1[pick(np.delete(np.arange(k_folds), k)), k] for k in range(k_folds)]
    mc, c = rules[best]
    return HardnessRule(mc, c, f1[best].tolist(), float(np.mean(nested)))


def crossfit_hard_mask(report: EnsembleReport, hard_labels: Sequence[bool], k_folds: int = 5, seed: int = 0,
                       min_recall: float = 0.0) -> tuple[np.ndarray, list[HardnessRule]]:
    """Out-of-fold hard detection: each fold is marked by a rule fitted on the other folds only."""
    y = np.asarray(hard_labels, dtype=bool)
    mask = np.zeros(len(y), dtype=bool)
    rules = []
    for k, fold in enumerate(kfold_split(len(y), k_folds, seed)):
        rest = np.setdiff1d(np.arange(len(y)), fold)
        rule = fit_hardness_rule(report.subset(rest), y[rest], k_folds, seed + k + 1, min_recall)
        mask[fold] = hard_mask(report.subset(fold), rule)
        rules.append(rule)
    return mask, rules


def subset_precision_recall(subset: set[str] | np.ndarray, labels, instance_ids: Sequence[str] | None = None
                            ) -> dict:
    """Precision/recall of a mined subset against hardness labels, plus the whole-split baseline.

    ``labels`` may be booleans or hardness label strings (``multi_frame`` is hard).
    """
    y = np.array([(l == MULTI_FRAME) if isinstance(l, str) or l is None else bool(l) for l in labels])
    if isinstance(subset, (set, frozenset)):
        if instance_ids is None:
            raise ValueError("instance_ids needed to resolve a subset of ids")
        pred = np.array([i in subset for i in instance_ids])
    else:
        pred = np.asarray(subset, dtype=bool)
    tp = float(np.sum(pred & y))
    base = float(y.mean()) if len(y) else float("nan")
    precision = tp / pred.sum() if pred.sum() else float("nan")
    recall = tp / y.sum() if y.sum() else float("nan")
    return {"precision": precision, "recall": recall, "subset_size": int(pred.sum()),
            "base_rate": base, "whole_split": {"precision": base, "recall": 1.0 if y.sum() else float("nan")},
            "precision_gain": precision - base}
