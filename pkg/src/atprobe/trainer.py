"""Training, evaluation and gradient verification for the selector."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .embedstore import QAInstance, Split
from .selector import ATPConfig, ATPSelector, language_rows, sample_frames, select_weights
from .tasks import (TEMPERATURE, accuracy, accuracy_by, info_nce, qa_cross_entropy, qa_scores,
                    recall_at_k, retrieval_rank_all)

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Non-finite loss or gradient during optimization."""


@dataclass
class TrainSchedule:
    total_steps: int = 320
    lr: float = 1e-4
    batch_size: int = 128
    tau_start: float = 5.0
    tau_end: float = 0.5
    beta_start: float = 1.0
    beta_end: float = 100.0
    resample_each_epoch: bool = True
    grad_clip: float = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.total_steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("need total_steps >= 0, batch_size >= 1, lr > 0")
        if min(self.tau_start, self.tau_end, self.beta_start, self.beta_end) <= 0:
            raise ValueError("tau and beta endpoints must be positive")
        if self.tau_end > self.tau_start:
            raise ValueError("tau must not increase (tau_end <= tau_start)")
        if self.beta_end < self.beta_start:
            raise ValueError("beta must not decrease (beta_end >= beta_start)")

    @classmethod
    def for_epochs(cls, n_instances: int, epochs: int, batch_size: int = 128, **kw) -> "TrainSchedule":
        steps = epochs * math.ceil(n_instances / batch_size)
        return cls(total_steps=steps, batch_size=batch_size, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def schedule_value(schedule: TrainSchedule, step: int) -> tuple[float, float]:
    """(tau, beta) at ``step``: tau decays geometrically, beta grows linearly."""
    T = schedule.total_steps
    if not 0 <= step <= max(T, 0):
        raise ValueError(f"step {step} outside [0, {T}]")
    frac = step / T if T else 0.0
    tau = schedule.tau_start * (schedule.tau_end / schedule.tau_start) ** frac
    beta = schedule.beta_start + (schedule.beta_end - schedule.beta_start) * frac
    if step == T and T:
        tau, beta = schedule.tau_end, schedule.beta_end
    return tau, beta


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adam_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for i, g in enumerate(grads):
        if g is not None and not torch.isfinite(g).all():
            bad = int((~torch.isfinite(g)).sum())
            raise NumericalError(f"non-finite gradient in parameter #{i} ({bad} entries)")
    b1, b2 = betas
    state.t += 1
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))


# --------------------------------------------------------------------------
# Batching
# --------------------------------------------------------------------------


@dataclass
class QABatch:
    frames: torch.Tensor  # (B, n, D)
    language: torch.Tensor | None  # (B, L, D)
    language_mask: torch.Tensor | None  # (B, L) True = real token
    candidates: torch.Tensor  # (B, M, D)
    candidate_mask: torch.Tensor  # (B, M)
    gt: torch.Tensor  # (B,)


def _pad(rows: list[np.ndarray | None], dim: int, dtype) -> tuple[torch.Tensor | None, torch.Tensor | None]:
    if all(r is None for r in rows):
        return None, None
    L = max(0 if r is None else len(r) for r in rows)
    out = np.zeros((len(rows), L, dim), dtype=np.float32)
    mask = np.zeros((len(rows), L), dtype=bool)
    for i, r in enumerate(rows):
        if r is not None:
            out[i, :len(r)] = r
            mask[i, :len(r)] = True
    return torch.as_tensor(out, dtype=dtype), torch.as_tensor(mask)


def _frame_rng(rng: np.random.Generator | None, seed: int, index: int) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng([seed, index])


def collate_qa(split: Split, indices, n: int, rng: np.random.Generator | None, condition_on: str,
               dtype=torch.float32, seed: int = 0) -> QABatch:
    """Stack sampled frames, language rows and candidates for ``indices``.

    With ``rng=None`` each instance gets a fixed per-index frame sample.
    """
    insts = [split.instances[i] for i in indices]
    frames = np.stack([sample_frames(split.video_of(x), n, _frame_rng(rng, seed, i))[0]
                       for x, i in zip(insts, indices)])
    dim = frames.shape[-1]
    lang, lmask = _pad([language_rows(x, condition_on) for x in insts], dim, dtype)
    cands, cmask = _pad([x.candidates for x in insts], dim, dtype)
    gt = torch.as_tensor([x.gt_index for x in insts], dtype=torch.long)
    return QABatch(torch.as_tensor(frames, dtype=dtype), lang, lmask, cands, cmask, gt)


def _masked_scores(selected, batch: QABatch, temperature=TEMPERATURE):
    s = qa_scores(selected, batch.candidates, temperature)
    return s.masked_fill(~batch.candidate_mask, float("-inf"))


def qa_batch_loss(model: ATPSelector, batch: QABatch, phase: str, tau: float, beta: float,
                  rng: np.random.Generator | None) -> torch.Tensor:
    logits = model(batch.frames, batch.language, batch.language_mask)
    w = select_weights(logits, phase, model.config.selection_mode, tau, beta, rng)
    selected = torch.einsum("bn,bnd->bd", w, batch.frames)
    return qa_cross_entropy(_masked_scores(selected, batch), batch.gt)


def retrieval_batch_loss(model: ATPSelector, split: Split, indices, n: int, phase: str, tau: float,
                         beta: float, rng: np.random.Generator, dtype=torch.float32) -> torch.Tensor:
    """Symmetric InfoNCE over all (text_i, video_j) pairs of the batch."""
    pairs = [split.instances[i] for i in indices]
    B = len(pairs)
    frames = torch.as_tensor(np.stack([sample_frames(split.video_of(p), n, rng)[0] for p in pairs]),
                             dtype=dtype)
    texts = torch.as_tensor(np.stack([p.text for p in pairs]), dtype=dtype)
    if model.config.condition_on == "none":
        logits = model(frames)
        w = select_weights(logits, phase, model.config.selection_mode, tau, beta, rng)
        chosen = torch.einsum("bn,bnd->bd", w, frames)
        sim = texts @ chosen.T
    else:
        # row i = text i against every video j
        f = frames.repeat(B, 1, 1)
        lang = texts.repeat_interleave(B, dim=0)[:, None]
        logits = model(f, lang)
        w = select_weights(logits, phase, model.config.selection_mode, tau, beta, rng)
        chosen = torch.einsum("bn,bnd->bd", w, f).view(B, B, -1)
        sim = torch.einsum("id,ijd->ij", texts, chosen)
    return info_nce(sim / TEMPERATURE)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainState:
    model: ATPSelector
    adam: AdamState
    rng: np.random.Generator
    step: int = 0
    history: list[dict] = field(default_factory=list)
    epoch_order: list[int] = field(default_factory=list)
    epoch_pos: int = 0


def params_digest(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_train_state(path, state: TrainState, schedule: TrainSchedule | None = None) -> None:
    tensors = dict(state.model.state_dict())
    for i, (m, v) in enumerate(zip(state.adam.m, state.adam.v)):
        tensors[f"adam.m.{i}"] = m
        tensors[f"adam.v.{i}"] = v
    save_checkpoint(
        path, "atp", state.model.config.to_dict(), tensors, step=state.step,
        dim=state.model.dim, adam_t=state.adam.t, rng_state=state.rng.bit_generator.state,
        epoch_order=state.epoch_order, epoch_pos=state.epoch_pos,
        schedule=None if schedule is None else schedule.to_dict(),
        history=state.history,
    )


def load_train_state(path) -> TrainState:
    header, tensors = load_checkpoint(path)
    if header["kind"] != "atp":
        raise ValueError(f"{path}: expected an atp checkpoint, got {header['kind']!r}")
    model = ATPSelector(header["dim"], ATPConfig(**header["config"]))
    sd = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    model.load_state_dict(sd)
    n = len(list(model.parameters()))
    adam = AdamState([tensors[f"adam.m.{i}"] for i in range(n)] if "adam.m.0" in tensors
                     else [torch.zeros_like(p) for p in model.parameters()],
                     [tensors[f"adam.v.{i}"] for i in range(n)] if "adam.v.0" in tensors
                     else [torch.zeros_like(p) for p in model.parameters()],
                     header.get("adam_t", 0))
    rng = np.random.default_rng()
    if header.get("rng_state"):
        rng.bit_generator.state = header["rng_state"]
    return TrainState(model, adam, rng, header["step"], header.get("history", []),
                      header.get("epoch_order", []), header.get("epoch_pos", 0))


def load_selector(path) -> ATPSelector:
    model = load_train_state(path).model
    model.eval()
    return model


def train_atp(split: Split, config: ATPConfig, schedule: TrainSchedule, dim: int | None = None,
              state: TrainState | None = None, checkpoint_path=None, log_every: int = 0,
              stop_at: int | None = None) -> TrainState:
    """Optimize the selector on ``split`` (QA or retrieval) until ``schedule.total_steps``.

    ``stop_at`` interrupts the run early without changing the schedule; the
    returned state can be checkpointed and resumed bit-for-bit.

    Frames are resampled every batch when ``resample_each_epoch`` is set, otherwise
    each instance keeps one fixed sample. On a non-finite loss the last good state
    is written to ``checkpoint_path`` (if given) and :class:`NumericalError` raised.
    """
    if len(split) == 0:
        raise ValueError("cannot train on an empty split")
    if state is None:
        dim = dim or int(next(iter(split.videos.values())).frames.shape[1])
        model = ATPSelector(dim, config)
        params = list(model.parameters())
        state = TrainState(model, AdamState.zeros(params), np.random.default_rng(config.seed))
    model = state.model
    cfg = model.config
    params = list(model.parameters())
    is_qa = isinstance(split.instances[0], QAInstance)
    N = len(split)
    end = schedule.total_steps if stop_at is None else min(stop_at, schedule.total_steps)
    model.train()
    while state.step < end:
        if state.epoch_pos >= len(state.epoch_order):
            state.epoch_order = state.rng.permutation(N).tolist()
            state.epoch_pos = 0
        idx = state.epoch_order[state.epoch_pos:state.epoch_pos + schedule.batch_size]
        tau, beta = schedule_value(schedule, state.step)
        frame_rng = state.rng if schedule.resample_each_epoch else None
        try:
            if is_qa:
                batch = collate_qa(split, idx, cfg.n_frames, frame_rng, cfg.condition_on, seed=cfg.seed)
                loss = qa_batch_loss(model, batch, "train", tau, beta, state.rng)
            else:
                loss = retrieval_batch_loss(model, split, idx, cfg.n_frames, "train", tau, beta,
                                            frame_rng or np.random.default_rng([cfg.seed, idx[0]]))
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at step {state.step}")
        except FloatingPointError as err:
            if checkpoint_path is not None:
                save_train_state(checkpoint_path, state, schedule)
            raise NumericalError(f"step {state.step}: {err}") from err
        model.zero_grad(set_to_none=True)
        loss.backward()
        if schedule.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, schedule.grad_clip)
        adam_step(params, [p.grad for p in params], state.adam, schedule.lr, schedule.adam_betas,
                  schedule.adam_eps)
        state.epoch_pos += len(idx)
        state.step += 1
        state.history.append({"step": state.step, "loss": float(loss.detach()), "tau": tau, "beta": beta})
        if log_every and state.step % log_every == 0:
            log.info("step %d loss %.4f tau %.3f beta %.1f", state.step, float(loss), tau, beta)
    model.eval()
    if checkpoint_path is not None:
        save_train_state(checkpoint_path, state, schedule)
    return state


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


@dataclass
class QAEval:
    predictions: np.ndarray
    gt: np.ndarray
    scores: list[np.ndarray]  # per instance, length m, float64
    selected: np.ndarray  # position of the chosen frame within the shuffled sample
    source_index: np.ndarray  # that frame's index in the video

    @property
    def correct(self) -> np.ndarray:
        return self.predictions == self.gt

    def confidence(self) -> np.ndarray:
        """Max softmax probability of each score vector."""
        out = np.empty(len(self.scores))
        for i, s in enumerate(self.scores):
            p = np.exp(s - s.max())
            out[i] = 1.0 / p.sum()
        return out


@torch.no_grad()
def predict_qa(split: Split, model: ATPSelector, n_frames: int | None = None, seed: int = 0,
               batch_size: int = 256) -> QAEval:
    """Discrete-inference predictions. Instance ``i`` always sees the sample drawn from ``(seed, i)``."""
    cfg = model.config
    n = n_frames or cfg.n_frames
    dtype = next(model.parameters()).dtype
    preds, sel, src, scores = [], [], [], []
    for start in range(0, len(split), batch_size):
        idx = list(range(start, min(start + batch_size, len(split))))
        rngs = [np.random.default_rng([seed, i]) for i in idx]
        samples = [sample_frames(split.video_of(split.instances[i]), n, r) for i, r in zip(idx, rngs)]
        insts = [split.instances[i] for i in idx]
        frames = torch.as_tensor(np.stack([s[0] for s in samples]), dtype=dtype)
        lang, lmask = _pad([language_rows(x, cfg.condition_on) for x in insts], frames.shape[-1], dtype)
        choice = model(frames, lang, lmask).argmax(dim=1)
        chosen = frames[torch.arange(len(idx)), choice].double()
        for j, x in enumerate(insts):
            s = qa_scores(chosen[j], torch.as_tensor(x.candidates, dtype=torch.float64)).numpy()
            scores.append(s)
            preds.append(int(np.argmax(s)))
            sel.append(int(choice[j]))
            src.append(int(samples[j][1][int(choice[j])]))
    gt = np.array([x.gt_index for x in split.instances], dtype=int)
    return QAEval(np.array(preds, dtype=int), gt, scores, np.array(sel, dtype=int), np.array(src, dtype=int))


def evaluate(split: Split, model: ATPSelector, n_frames: int | None = None, seed: int = 0) -> dict:
    """Metrics report for a QA or retrieval split; never mutates ``model``."""
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    if not isinstance(split.instances[0], QAInstance):
        ranked = retrieval_rank_all(split, model, n_frames, seed)
        gt = [p.video_id for p in split.instances]
        return {"task": "retrieval", "n": len(gt),
                **{f"R@{k}": recall_at_k(ranked, gt, k) for k in (1, 5, 10)}}
    res = predict_qa(split, model, n_frames, seed)
    report = {"task": "qa", "n": len(split), "accuracy": accuracy(res.predictions, res.gt)}
    cats = [x.category for x in split.instances]
    if any(c is not None for c in cats):
        report["accuracy_by_category"] = accuracy_by(res.predictions, res.gt, cats)
    labels = [x.hardness_label for x in split.instances]
    if any(h is not None for h in labels):
        report["accuracy_by_hardness"] = accuracy_by(res.predictions, res.gt, labels)
    return report


# --------------------------------------------------------------------------
# Gradient check
# --------------------------------------------------------------------------


def soft_path_loss(model: ATPSelector, batch: QABatch, beta: float = 1.0) -> torch.Tensor:
    """QA loss with softmax(beta * logits) selection; smooth in every parameter."""
    logits = model(batch.frames, batch.language, batch.language_mask)
    w = (beta * logits).softmax(dim=-1)
    selected = torch.einsum("bn,bnd->bd", w, batch.frames)
    return qa_cross_entropy(_masked_scores(selected, batch), batch.gt)


def grad_check(model: ATPSelector, batch: QABatch, epsilon: float = 1e-6, num_params: int = 200,
               seed: int = 0, beta: float = 1.0, atol: float = 1e-6) -> dict:
    """Compare backprop against central differences on randomly chosen scalar parameters.

    Relative error per entry is ``|a - n| / max(|a|, |n|, atol)``. Run on a
    float64 model and batch.
    """
    params = list(model.parameters())
    model.zero_grad(set_to_none=True)
    soft_path_loss(model, batch, beta).backward()
    analytic = [p.grad.detach().clone() for p in params]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(num_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errors, records = [], []
    with torch.no_grad():
        for f in flat:
            pi = int(np.searchsorted(offsets, f, side="right") - 1)
            j = int(f - offsets[pi])
            p = params[pi].view(-1)
            orig = p[j].item()
            p[j] = orig + epsilon
            up = soft_path_loss(model, batch, beta).item()
            p[j] = orig - epsilon
            down = soft_path_loss(model, batch, beta).item()
            p[j] = orig
            num = (up - down) / (2 * epsilon)
            ana = analytic[pi].view(-1)[j].item()
            err = abs(ana - num) / max(abs(ana), abs(num), atol)
            errors.append(err)
            records.append((pi, j, ana, num))
    return {"max_rel_error": float(max(errors)), "mean_rel_error": float(np.mean(errors)),
            "checked": len(errors), "entries": records}
