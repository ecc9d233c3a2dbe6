"""Parameter-free task heads on frozen embeddings: scoring, losses, metrics."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .embedstore import Split
from .selector import ATPSelector, sample_frames

TEMPERATURE = 0.07


def _t(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def qa_scores(selected, candidates, temperature: float = TEMPERATURE) -> torch.Tensor:
    """Dot products of the selected embedding with each candidate, divided by ``temperature``.

    Works on single instances (``(D,)`` and ``(m, D)``) or batches
    (``(B, D)`` and ``(B, m, D)``).
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    s, c = _t(selected), _t(candidates)
    if s.shape[-1] != c.shape[-1]:
        raise ValueError(f"dim mismatch: {s.shape[-1]} vs {c.shape[-1]}")
    c = c.to(s.dtype)
    return (c @ s.unsqueeze(-1)).squeeze(-1) / temperature


def qa_cross_entropy(scores, gt_index) -> torch.Tensor:
    """``-log softmax(scores)[gt]``; batched input returns the mean over the batch."""
    s = _t(scores)
    gt = torch.as_tensor(gt_index, dtype=torch.long)
    if s.dim() == 1:
        return -torch.log_softmax(s, dim=-1)[gt]
    return -torch.log_softmax(s, dim=-1).gather(-1, gt[:, None]).squeeze(-1).mean()


def info_nce(similarity) -> torch.Tensor:
    """Symmetric InfoNCE over a square similarity matrix whose diagonal holds the matched pairs."""
    s = _t(similarity)
    if s.dim() != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"similarity must be square, got {tuple(s.shape)}")
    diag = torch.arange(s.shape[0])
    rows = -torch.log_softmax(s, dim=1)[diag, diag].mean()
    cols = -torch.log_softmax(s, dim=0)[diag, diag].mean()
    return 0.5 * (rows + cols)


def accuracy(predictions: Sequence[int], gt: Sequence[int]) -> float:
    p, g = np.asarray(predictions), np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError("predictions and gt differ in length")
    if p.size == 0:
        return float("nan")
    return float(np.mean(p == g))


def accuracy_by(predictions, gt, labels: Sequence) -> dict[str, float]:
    """Accuracy per label value; instances with label ``None`` are skipped, empty groups absent."""
    groups = defaultdict(list)
    for i, lab in enumerate(labels):
        if lab is not None:
            groups[lab].append(i)
    p, g = np.asarray(predictions), np.asarray(gt)
    return {lab: float(np.mean(p[idx] == g[idx])) for lab, idx in sorted(groups.items())}


def recall_at_k(ranked_lists: Sequence[Sequence], gt_ids: Sequence, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(ranked_lists) == 0:
        return float("nan")
    hits = [gt in list(r[:k]) for r, gt in zip(ranked_lists, gt_ids)]
    return float(np.mean(hits))


@torch.no_grad()
def retrieval_rank_all(split: Split, model: ATPSelector, n_frames: int | None = None,
                       seed: int = 0) -> list[list[str]]:
    """Rank every video for every text, best first.

    Selection is text-conditioned, so this costs one selector pass per
    (text, video) pair. Under ``condition_on="none"`` one pass per video suffices.
    """
    if not split.videos:
        raise ValueError("empty video corpus")
    cfg = model.config
    n = n_frames or cfg.n_frames
    rng = np.random.default_rng(seed)
    vids = list(split.videos)
    dtype = next(model.parameters()).dtype
    frames = torch.as_tensor(np.stack([sample_frames(split.videos[v], n, rng)[0] for v in vids]),
                             dtype=dtype)
    texts = torch.as_tensor(np.stack([p.text for p in split.instances]), dtype=dtype)
    V = len(vids)
    if cfg.condition_on == "none":
        idx = model(frames).argmax(dim=1)
        chosen = frames[torch.arange(V), idx]
        scores = texts @ chosen.T
    else:
        scores = torch.empty(len(texts), V, dtype=dtype)
        for t, text in enumerate(texts):
            lang = text.expand(V, 1, -1)
            idx = model(frames, lang).argmax(dim=1)
            scores[t] = frames[torch.arange(V), idx] @ text
    order = torch.argsort(-scores, dim=1, stable=True)
    return [[vids[j] for j in row] for row in order.tolist()]


def write_metrics(report: dict, out_dir, per_category: dict[str, dict[str, float]] | None = None) -> None:
    """Write ``metrics.json`` and, if given, one CSV per breakdown table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for name, table in (per_category or {}).items():
        with (out / f"{name}.csv").open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["category", "accuracy"])
            for k, v in table.items():
                w.writerow([k, v])
