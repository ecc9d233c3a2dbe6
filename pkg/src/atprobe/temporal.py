"""Temp[ATP]: ordered reasoning over one frozen-selector pick per video partition.

Unlike the selector, this model is deliberately order-aware: each partition's
pick carries a learned positional encoding. The frozen selector runs at
discrete inference only and none of its parameters are touched.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .analysis import CONFIDENCE_GRID, EnsembleReport, ensemble_report
from .checkpoint import load_checkpoint, save_checkpoint
from .embedstore import QAInstance, Split, VideoRecord, kfold_split
from .selector import ATPSelector, EncoderLayer, sample_frames
from .tasks import qa_cross_entropy, qa_scores
from .trainer import AdamState, NumericalError, TrainSchedule, _pad, adam_step

log = logging.getLogger(__name__)


@dataclass
class TemporalConfig:
    k_partitions: int = 4
    temporal_d_model: int = 128
    temporal_layers: int = 2
    temporal_heads: int = 4
    ff_hidden: int = 256
    uses_positional_encodings: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.k_partitions < 1:
            raise ValueError("k_partitions must be >= 1")
        if not self.uses_positional_encodings:
            raise ValueError("the temporal model requires positional encodings")
        if self.temporal_d_model % self.temporal_heads:
            raise ValueError("temporal_d_model must be divisible by temporal_heads")

    def to_dict(self) -> dict:
        return asdict(self)


def partition_video(num_frames: int | VideoRecord, k: int) -> list[tuple[int, int]]:
    """``k`` contiguous ``[start, end)`` ranges covering the video; earlier ranges take the remainder."""
    T = num_frames.num_frames if isinstance(num_frames, VideoRecord) else int(num_frames)
    if k < 1 or T < k:
        raise ValueError(f"cannot split {T} frames into {k} partitions")
    base, extra = divmod(T, k)
    out, start = [], 0
    for p in range(k):
        end = start + base + (p < extra)
        out.append((start, end))
        start = end
    return out


class TemporalModel(nn.Module):
    def __init__(self, dim: int, config: TemporalConfig):
        super().__init__()
        self.dim = dim
        self.config = config
        d = config.temporal_d_model
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.input_projection = nn.Linear(dim, d)
            self.positional_encodings = nn.Parameter(0.02 * torch.randn(config.k_partitions, d))
            self.aggregate_token = nn.Parameter(0.02 * torch.randn(d))
            self.language_embedding = nn.Parameter(torch.zeros(d))
            self.layers = nn.ModuleList(
                EncoderLayer(d, config.temporal_heads, config.ff_hidden)
                for _ in range(config.temporal_layers)
            )
            self.final_norm = nn.LayerNorm(d)
            self.mix_head = nn.Linear(d, 1)
            self.output_projection = nn.Linear(d, dim)
            nn.init.zeros_(self.output_projection.weight)
            nn.init.zeros_(self.output_projection.bias)

    def forward(self, selections: torch.Tensor, question: torch.Tensor) -> torch.Tensor:
        """Unit video-level embedding ``(B, D)`` from ordered picks ``(B, k, D)`` and questions ``(B, D)``.

        The embedding is a signed, learned mix of the picks plus a projection of
        the aggregate token (zero at initialization). Keeping the output in the
        span of the frozen picks is what lets it generalize from a few thousand
        examples instead of memorizing them.
        """
        B, k, _ = selections.shape
        if k != self.config.k_partitions:
            raise ValueError(f"expected {self.config.k_partitions} partitions, got {k}")
        x = self.input_projection(selections) + self.positional_encodings
        q = self.input_projection(question)[:, None] + self.language_embedding
        agg = self.aggregate_token.expand(B, 1, -1)
        h = torch.cat([agg, q, x], dim=1)
        for layer in self.layers:
            h = layer(h)
        h = self.final_norm(h)
        mix = self.mix_head(h[:, 2:])  # (B, k, 1)
        v = (mix * selections).sum(dim=1) + self.output_projection(h[:, 0])
        return F.normalize(v, dim=-1)


# --------------------------------------------------------------------------
# Frozen per-partition selection
# --------------------------------------------------------------------------


@torch.no_grad()
def partition_selections(split: Split, atp: ATPSelector, k: int, seed: int = 0) -> np.ndarray:
    """Frozen-selector pick for every (instance, partition), shape ``(N, k, D)``, partition order kept.

    Each partition is presented as a shuffled sample of at most ``atp.config.n_frames`` frames.
    """
    cfg = atp.config
    dtype = next(atp.parameters()).dtype
    N = len(split)
    D = split.video_of(split.instances[0]).frames.shape[1] if N else 0
    out = np.zeros((N, k, D), dtype=np.float32)
    groups = defaultdict(list)  # sample length -> [(i, p, rows, language)]
    for i, inst in enumerate(split.instances):
        video = split.video_of(inst)
        rng = np.random.default_rng([seed, i])
        for p, (a, b) in enumerate(partition_video(video, k)):
            part = VideoRecord(video.video_id, video.frames[a:b])
            rows, _ = sample_frames(part, min(cfg.n_frames, b - a), rng)
            lang = inst.question[None] if cfg.condition_on != "none" else None
            groups[len(rows)].append((i, p, rows, lang))
    for items in groups.values():
        for s in range(0, len(items), 1024):
            chunk = items[s:s + 1024]
            frames = torch.as_tensor(np.stack([c[2] for c in chunk]), dtype=dtype)
            lang, lmask = _pad([c[3] for c in chunk], D, dtype)
            choice = atp(frames, lang, lmask).argmax(dim=1).numpy()
            for (i, p, rows, _), j in zip(chunk, choice):
                out[i, p] = rows[j]
    return out


def _candidates(split: Split, dtype=torch.float32):
    return _pad([x.candidates for x in split.instances], split.video_of(split.instances[0]).frames.shape[1],
                dtype)


def _scores(video_emb, cands, cmask):
    return qa_scores(video_emb, cands).masked_fill(~cmask, float("-inf"))


def temp_atp_forward(instance: QAInstance, video: VideoRecord, frozen_atp: ATPSelector,
                     temporal: TemporalModel, seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Video-level embedding and QA scores for one instance."""
    split = Split("one", {video.video_id: video}, [instance])
    sel = torch.as_tensor(partition_selections(split, frozen_atp, temporal.config.k_partitions, seed))
    q = torch.as_tensor(instance.question[None])
    v = temporal(sel, q)[0]
    return v, qa_scores(v, torch.as_tensor(instance.candidates))


# --------------------------------------------------------------------------
# Training / inference
# --------------------------------------------------------------------------


@dataclass
class TemporalState:
    model: TemporalModel
    adam: AdamState
    step: int = 0
    history: list[dict] = field(default_factory=list)


def train_temporal(split: Split, frozen_atp: ATPSelector, tconfig: TemporalConfig,
                   schedule: TrainSchedule, selections: np.ndarray | None = None,
                   seed: int = 0) -> TemporalState:
    """Fit only the temporal model; ``frozen_atp`` is used under ``no_grad`` and never updated."""
    if len(split) == 0:
        raise ValueError("cannot train on an empty split")
    for p in frozen_atp.parameters():
        p.requires_grad_(False)
    if selections is None:
        selections = partition_selections(split, frozen_atp, tconfig.k_partitions, seed)
    dim = selections.shape[-1]
    model = TemporalModel(dim, tconfig)
    params = list(model.parameters())
    state = TemporalState(model, AdamState.zeros(params))
    sel = torch.as_tensor(selections)
    qs = torch.as_tensor(np.stack([x.question for x in split.instances]))
    cands, cmask = _candidates(split)
    gt = torch.as_tensor([x.gt_index for x in split.instances])
    rng = np.random.default_rng([tconfig.seed, 1])
    N = len(split)
    order, pos = [], 0
    model.train()
    while state.step < schedule.total_steps:
        if pos >= len(order):
            order, pos = rng.permutation(N), 0
        idx = torch.as_tensor(order[pos:pos + schedule.batch_size])
        pos += len(idx)
        v = model(sel[idx], qs[idx])
        loss = qa_cross_entropy(_scores(v, cands[idx], cmask[idx]), gt[idx])
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite temporal loss at step {state.step}")
        model.zero_grad(set_to_none=True)
        loss.backward()
        if schedule.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, schedule.grad_clip)
        adam_step(params, [p.grad for p in params], state.adam, schedule.lr, schedule.adam_betas,
                  schedule.adam_eps)
        state.step += 1
        state.history.append({"step": state.step, "loss": float(loss.detach())})
    model.eval()
    return state


@dataclass
class TemporalEval:
    predictions: np.ndarray
    gt: np.ndarray
    scores: np.ndarray  # (N, M), -inf on padded candidates

    @property
    def correct(self) -> np.ndarray:
        return self.predictions == self.gt


@torch.no_grad()
def predict_temporal(split: Split, frozen_atp: ATPSelector, temporal: TemporalModel,
                     selections: np.ndarray | None = None, seed: int = 0) -> TemporalEval:
    if selections is None:
        selections = partition_selections(split, frozen_atp, temporal.config.k_partitions, seed)
    v = temporal(torch.as_tensor(selections), torch.as_tensor(np.stack([x.question for x in split.instances])))
    cands, cmask = _candidates(split)
    s = _scores(v.double(), cands.double(), cmask)
    gt = np.array([x.gt_index for x in split.instances])
    return TemporalEval(s.argmax(dim=1).numpy(), gt, s.numpy())


def save_temporal(path, state: TemporalState, atp_digest: str | None = None) -> None:
    save_checkpoint(path, "temporal", state.model.config.to_dict(), dict(state.model.state_dict()),
                    step=state.step, dim=state.model.dim, frozen_atp_sha256=atp_digest,
                    history=state.history)


def load_temporal(path) -> TemporalModel:
    header, tensors = load_checkpoint(path)
    if header["kind"] != "temporal":
        raise ValueError(f"{path}: expected a temporal checkpoint, got {header['kind']!r}")
    model = TemporalModel(header["dim"], TemporalConfig(**header["config"]))
    model.load_state_dict(tensors)
    model.eval()
    return model


# --------------------------------------------------------------------------
# Confidence routing between the ensemble and Temp[ATP]
# --------------------------------------------------------------------------

THETA_GRID = np.concatenate([[0.0], CONFIDENCE_GRID])


@dataclass
class RoutingRule:
    theta: float
    fold_accuracy: list[float] = field(default_factory=list)
    cv_accuracy: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")


def route(report: EnsembleReport, temporal_predictions: np.ndarray, theta: float) -> dict:
    """Answer with the ensemble's modal answer when its mean confidence >= theta, else Temp[ATP]."""
    use_atp = report.mean_confidence >= theta
    pred = np.where(use_atp, report.modal_answer, temporal_predictions)
    return {
        "accuracy": float(np.mean(pred == report.gt)),
        "atp_only_accuracy": float(np.mean(report.modal_answer == report.gt)),
        "temporal_only_accuracy": float(np.mean(temporal_predictions == report.gt)),
        "atp_skip_fraction": float(use_atp.mean()),
        "theta": float(theta),
        "predictions": pred,
    }


def fit_routing_threshold(report: EnsembleReport, temporal_predictions: np.ndarray, k_folds: int = 5,
                          seed: int = 0) -> RoutingRule:
    """Pick theta maximizing mean routed accuracy over folds; ties favour the smaller theta (more skipping)."""
    atp_ok = report.modal_answer == report.gt
    tmp_ok = np.asarray(temporal_predictions) == report.gt
    folds = kfold_split(len(atp_ok), k_folds, seed)
    acc = np.zeros((len(THETA_GRID), k_folds))
    for t, theta in enumerate(THETA_GRID):
        ok = np.where(report.mean_confidence >= theta, atp_ok, tmp_ok)
        for k, f in enumerate(folds):
            acc[t, k] = ok[f].mean()
    mean = acc.mean(axis=1)
    best = int(np.flatnonzero(mean >= mean.max() - 1e-12)[0])
    nested = []
    for k in range(k_folds):
        others = np.delete(np.arange(k_folds), k)
        m = acc[:, others].mean(axis=1)
        nested.append(acc[int(np.flatnonzero(m >= m.max() - 1e-12)[0]), k])
    return RoutingRule(float(THETA_GRID[best]), acc[best].tolist(), float(np.mean(nested)))


def crossfit_route(report: EnsembleReport, temporal_predictions: np.ndarray, k_folds: int = 5,
                   seed: int = 0) -> tuple[dict, list[RoutingRule]]:
    """Route each fold with a theta fitted on the other folds only; metrics pool the held-out folds."""
    tpred = np.asarray(temporal_predictions)
    N = len(tpred)
    use_atp = np.zeros(N, dtype=bool)
    rules = []
    for k, fold in enumerate(kfold_split(N, k_folds, seed)):
        rest = np.setdiff1d(np.arange(N), fold)
        rule = fit_routing_threshold(report.subset(rest), tpred[rest], k_folds, seed + k + 1)
        use_atp[fold] = report.mean_confidence[fold] >= rule.theta
        rules.append(rule)
    pred = np.where(use_atp, report.modal_answer, tpred)
    return {
        "accuracy": float(np.mean(pred == report.gt)),
        "atp_only_accuracy": float(np.mean(report.modal_answer == report.gt)),
        "temporal_only_accuracy": float(np.mean(tpred == report.gt)),
        "atp_skip_fraction": float(use_atp.mean()),
        "thetas": [r.theta for r in rules],
    }, rules


def routed_eval(split: Split, ensemble, frozen_atp: ATPSelector, temporal: TemporalModel,
                rule: RoutingRule, seed: int = 0) -> dict:
    report = ensemble_report(ensemble, split, seed)
    tpred = predict_temporal(split, frozen_atp, temporal, seed=seed).predictions
    out = route(report, tpred, rule.theta)
    out.pop("predictions")
    return out
