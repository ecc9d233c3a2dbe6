"""The atemporal selector: a tiny set encoder that picks one frozen frame embedding.

The encoder has no positional parameters at all. Frame tokens and language
tokens are told apart only by two learned modality vectors, so the logits are
equivariant to any reordering of the frame rows.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .embedstore import QAInstance, RetrievalPair, VideoRecord

SELECTION_MODES = ("gumbel_st", "entropy_anneal")
CONDITIONS = ("none", "question", "question_plus_candidates", "text_query")
MAX_LAYERS = 3
MAX_HEADS = 3
CAPACITY_LIMIT = 0.05


@dataclass
class ATPConfig:
    n_frames: int = 16
    d_model: int = 128
    n_layers: int = 1
    n_heads: int = 2
    ff_hidden: int = 64
    mlp_hidden: int = 128
    selection_mode: str = "gumbel_st"
    condition_on: str = "question"
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if not 1 <= self.n_layers <= MAX_LAYERS:
            raise ValueError(f"n_layers must be in [1, {MAX_LAYERS}] (low-capacity cap)")
        if not 1 <= self.n_heads <= MAX_HEADS:
            raise ValueError(f"n_heads must be in [1, {MAX_HEADS}] (low-capacity cap)")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"selection_mode must be one of {SELECTION_MODES}")
        if self.condition_on not in CONDITIONS:
            raise ValueError(f"condition_on must be one of {CONDITIONS}")

    def to_dict(self) -> dict:
        return asdict(self)


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        B, T, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(B, T, 3, h, d // h).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(d // h)
        if key_mask is not None:
            att = att.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        y = att.softmax(dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(B, T, d))


class EncoderLayer(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d_model: int, n_heads: int, ff_hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, ff_hidden), nn.GELU(), nn.Linear(ff_hidden, d_model))

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.ff(self.norm2(x))


def reference_param_count(d_model: int, n_layers: int = 12) -> int:
    """Parameters of a standard post-embedding encoder (FF width 4*d_model)."""
    d = d_model
    per_layer = (4 * d * d + 4 * d) + (8 * d * d + 5 * d) + 4 * d
    return n_layers * per_layer


class ATPSelector(nn.Module):
    VISION, LANGUAGE = 0, 1

    def __init__(self, dim: int, config: ATPConfig):
        super().__init__()
        self.dim = dim
        self.config = config
        d = config.d_model
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.input_projection = nn.Linear(dim, d)
            self.modality_embeddings = nn.Parameter(torch.zeros(2, d))
            self.encoder_layers = nn.ModuleList(
                EncoderLayer(d, config.n_heads, config.ff_hidden) for _ in range(config.n_layers)
            )
            self.final_norm = nn.LayerNorm(d)
            self.score_mlp = nn.Sequential(
                nn.Linear(d, config.mlp_hidden), nn.GELU(), nn.Linear(config.mlp_hidden, 1)
            )
        ratio = self.capacity_ratio()
        if ratio >= CAPACITY_LIMIT:
            warnings.warn(f"selector has {ratio:.1%} of a 12-layer reference encoder's parameters "
                          f"(limit {CAPACITY_LIMIT:.0%})", stacklevel=2)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def capacity_ratio(self) -> float:
        return self.param_count() / reference_param_count(self.config.d_model)

    def forward(self, frames: torch.Tensor, language: torch.Tensor | None = None,
                language_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Selection logits ``(B, n)`` for frames ``(B, n, D)`` and language ``(B, L, D)``."""
        if frames.dim() != 3 or frames.shape[-1] != self.dim:
            raise ValueError(f"frames must be (B, n, {self.dim}), got {tuple(frames.shape)}")
        n = frames.shape[1]
        tokens = self.input_projection(frames) + self.modality_embeddings[self.VISION]
        key_mask = None
        if language is not None and language.shape[1] > 0:
            if language.shape[-1] != self.dim or language.shape[0] != frames.shape[0]:
                raise ValueError(f"language must be (B, L, {self.dim}), got {tuple(language.shape)}")
            lang = self.input_projection(language) + self.modality_embeddings[self.LANGUAGE]
            tokens = torch.cat([tokens, lang], dim=1)
            if language_mask is not None:
                vis = torch.ones(frames.shape[:2], dtype=torch.bool, device=frames.device)
                key_mask = torch.cat([vis, language_mask], dim=1)
        for layer in self.encoder_layers:
            tokens = layer(tokens, key_mask)
        # language tokens take part in attention but emit no logit
        return self.score_mlp(self.final_norm(tokens[:, :n])).squeeze(-1)


# --------------------------------------------------------------------------
# Sampling and selection
# --------------------------------------------------------------------------


def sample_frames(video: VideoRecord, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` frames uniformly without replacement, in shuffled order.

    The returned source indices are for reporting only; the selector never sees
    them. If the video is shorter than ``n`` the draw falls back to sampling with
    replacement.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    T = video.num_frames
    if n > T:
        warnings.warn(f"video {video.video_id} has {T} frames < n={n}; sampling with replacement",
                      stacklevel=2)
        idx = rng.integers(0, T, size=n)
    else:
        idx = rng.permutation(T)[:n]
    return video.frames[idx], idx


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    tiny = np.finfo(np.float64).tiny
    return -np.log(-np.log(np.clip(u, tiny, 1.0 - 1e-16)))


def gumbel_st(logits: torch.Tensor, tau: float, rng: np.random.Generator | None = None,
              gumbel: torch.Tensor | None = None) -> torch.Tensor:
    """Straight-through Gumbel-Softmax over the last axis.

    The forward value is exactly one-hot at ``argmax((logits + G) / tau)``; the
    backward pass is that of ``softmax((logits + G) / tau)``. Pass ``gumbel`` to
    fix the noise.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite selection logits")
    if gumbel is None:
        if rng is None:
            raise ValueError("need rng or explicit gumbel noise")
        gumbel = torch.as_tensor(sample_gumbel(tuple(logits.shape), rng), dtype=logits.dtype)
    soft = ((logits + gumbel) / tau).softmax(dim=-1)
    hard = F.one_hot(soft.argmax(dim=-1), logits.shape[-1]).to(logits.dtype)
    # soft - soft.detach() is exactly zero, so the forward value stays one-hot
    return hard + (soft - soft.detach())


def entropy_annealed_weights(logits: torch.Tensor, beta: float) -> torch.Tensor:
    """``softmax(beta * logits)``; larger ``beta`` means lower entropy."""
    if beta < 1:
        raise ValueError("beta must be >= 1")
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite selection logits")
    return (beta * logits).softmax(dim=-1)


@dataclass
class SelectionResult:
    logits: torch.Tensor  # (n,)
    weights: torch.Tensor  # (n,)
    selected_index: int
    selected_embedding: torch.Tensor  # (D,)
    source_indices: np.ndarray | None = None


def select_weights(logits: torch.Tensor, phase: str, mode: str, tau: float = 1.0, beta: float = 1.0,
                   rng: np.random.Generator | None = None) -> torch.Tensor:
    """Selection weights for a batch of logits ``(..., n)``."""
    if phase == "infer":
        return F.one_hot(logits.argmax(dim=-1), logits.shape[-1]).to(logits.dtype)
    if phase != "train":
        raise ValueError(f"phase must be 'train' or 'infer', got {phase!r}")
    if mode == "gumbel_st":
        return gumbel_st(logits, tau, rng)
    if mode == "entropy_anneal":
        return entropy_annealed_weights(logits, beta)
    raise ValueError(f"unknown selection mode {mode!r}")


def select_embedding(frames: torch.Tensor, logits: torch.Tensor, phase: str = "infer",
                     mode: str = "gumbel_st", tau: float = 1.0, beta: float = 1.0,
                     rng: np.random.Generator | None = None) -> SelectionResult:
    """Pick one row of ``frames`` (n, D) from ``logits`` (n,).

    At inference the winning row is returned as-is (ties go to the smallest
    position). During training the embedding is ``weights @ frames``.
    """
    if frames.shape[0] == 0:
        raise ValueError("empty frame set")
    if frames.shape[0] != logits.shape[0]:
        raise ValueError("frames and logits lengths differ")
    weights = select_weights(logits, phase, mode, tau, beta, rng)
    idx = int(weights.detach().argmax())
    if phase == "infer":
        emb = frames[idx]
    else:
        emb = weights @ frames
    return SelectionResult(logits, weights, idx, emb)


def language_rows(item, condition_on: str) -> np.ndarray | None:
    """Language tokens fed to the selector for ``item`` under ``condition_on``."""
    if condition_on == "none":
        return None
    if isinstance(item, QAInstance):
        if condition_on == "question":
            return item.question[None]
        if condition_on == "question_plus_candidates":
            return np.concatenate([item.question[None], item.candidates], axis=0)
    elif isinstance(item, RetrievalPair) and condition_on == "text_query":
        return item.text[None]
    raise ValueError(f"condition_on={condition_on!r} does not apply to {type(item).__name__}")


def selector_forward(frames, language, model: ATPSelector) -> torch.Tensor:
    """Logits ``(n,)`` for a single frame set ``(n, D)`` and language rows ``(L, D)``."""
    dtype = next(model.parameters()).dtype
    f = torch.as_tensor(np.asarray(frames), dtype=dtype)[None]
    lang = None if language is None else torch.as_tensor(np.asarray(language), dtype=dtype)[None]
    return model(f, lang)[0]


def atp_forward(item, video: VideoRecord, model: ATPSelector, phase: str = "infer",
                tau: float = 1.0, beta: float = 1.0, rng: np.random.Generator | None = None,
                n_frames: int | None = None) -> SelectionResult:
    """Sample frames, score them and select one, for a single QA instance or retrieval pair."""
    rng = rng if rng is not None else np.random.default_rng(model.config.seed)
    cfg = model.config
    rows, src = sample_frames(video, n_frames or cfg.n_frames, rng)
    lang = language_rows(item, cfg.condition_on)
    logits = selector_forward(rows, lang, model)
    frames = torch.as_tensor(rows, dtype=logits.dtype)
    res = select_embedding(frames, logits, phase, cfg.selection_mode, tau, beta, rng)
    res.source_indices = src
    return res
