"""Embedding datasets: in-memory records, on-disk format, synthetic generators.

On-disk layout::

    <root>/manifest.json
    <root>/<split>/videos.bin           float32 LE, row-major, all frames
    <root>/<split>/videos.idx.jsonl     one record per video (row offset, rows)
    <root>/<split>/language.bin         float32 LE, question/candidate/text rows
    <root>/<split>/instances.jsonl      one record per instance

Frames are stored in temporal order. Only partitioning and reporting read that
order; the selector receives shuffled samples.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
NORM_TOL = 1e-4

SINGLE_FRAME = "single_frame"
MULTI_FRAME = "multi_frame"


class DataValidationError(ValueError):
    """Raised when a dataset on disk or in memory violates its invariants."""

    def __init__(self, message: str, path: str | os.PathLike | None = None, record: str | None = None):
        self.path = None if path is None else str(path)
        self.record = record
        locus = []
        if self.path:
            locus.append(f"file={self.path}")
        if record is not None:
            locus.append(f"record={record}")
        super().__init__(message + (f" ({', '.join(locus)})" if locus else ""))


@dataclass
class VideoRecord:
    video_id: str
    frames: np.ndarray  # (|V|, D) float32, temporal order
    source_fps: float | None = None

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class QAInstance:
    instance_id: str
    video_id: str
    question: np.ndarray  # (D,)
    candidates: np.ndarray  # (m, D)
    gt_index: int
    hardness_label: str | None = None
    category: str | None = None


@dataclass
class RetrievalPair:
    instance_id: str
    video_id: str
    text: np.ndarray  # (D,)
    category: str | None = None


@dataclass
class Split:
    name: str
    videos: dict[str, VideoRecord] = field(default_factory=dict)
    instances: list = field(default_factory=list)

    def video_of(self, inst) -> VideoRecord:
        return self.videos[inst.video_id]

    def subset(self, indices: Iterable[int], name: str | None = None) -> "Split":
        insts = [self.instances[i] for i in indices]
        vids = {i.video_id: self.videos[i.video_id] for i in insts}
        return Split(name or self.name, vids, insts)

    def __len__(self) -> int:
        return len(self.instances)


@dataclass
class SplitEntry:
    name: str
    instance_count: int
    video_count: int
    files: dict[str, str]
    rows: dict[str, int]


@dataclass
class DatasetManifest:
    format_version: int
    dim: int
    task: str
    normalized: bool
    splits: list[SplitEntry]

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "dim": self.dim,
            "task": self.task,
            "normalized": self.normalized,
            "splits": [vars(s) for s in self.splits],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        return cls(
            format_version=int(obj["format_version"]),
            dim=int(obj["dim"]),
            task=obj["task"],
            normalized=bool(obj.get("normalized", False)),
            splits=[SplitEntry(**s) for s in obj["splits"]],
        )


@dataclass
class Dataset:
    task: str  # "qa" | "retrieval"
    dim: int
    splits: dict[str, Split]
    normalized: bool = True

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]


def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.maximum(n, 1e-12)


def check_embeddings(arr: np.ndarray, normalized: bool, path=None, record=None) -> None:
    """Assert finiteness and, when ``normalized``, unit row norms."""
    if not np.all(np.isfinite(arr)):
        raise DataValidationError("non-finite value in embeddings", path, record)
    if normalized and arr.size:
        norms = np.linalg.norm(arr.astype(np.float64).reshape(-1, arr.shape[-1]), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
        if bad.size:
            raise DataValidationError(
                f"row {int(bad[0])} has L2 norm {norms[bad[0]]:.6f}, expected 1", path, record
            )


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def _write_f32(path: Path, rows: list[np.ndarray], dim: int) -> int:
    if rows:
        block = np.concatenate([np.asarray(r, dtype=np.float32).reshape(-1, dim) for r in rows], axis=0)
    else:
        block = np.zeros((0, dim), dtype=np.float32)
    path.write_bytes(block.astype("<f4", copy=False).tobytes(order="C"))
    return int(block.shape[0])


def _read_f32(path: Path, rows: int, dim: int) -> np.ndarray:
    if not path.is_file():
        raise DataValidationError("missing blob file", path)
    expected = rows * dim * 4
    size = path.stat().st_size
    if size != expected:
        raise DataValidationError(
            f"byte length {size} != rows*dim*4 = {rows}*{dim}*4 = {expected}", path
        )
    return np.frombuffer(path.read_bytes(), dtype="<f4").reshape(rows, dim).astype(np.float32)


def _read_jsonl(path: Path) -> list[dict]:
    if not path.is_file():
        raise DataValidationError("missing index file", path)
    out = []
    with path.open() as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise DataValidationError(f"bad JSON: {e.msg}", path, f"line {lineno}") from e
    return out


def save_dataset(dataset: Dataset, root: str | os.PathLike) -> DatasetManifest:
    """Write ``dataset`` under ``root``; returns the manifest written."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write dataset to {root}: {e}") from e
    dim = dataset.dim
    entries = []
    for name, split in dataset.splits.items():
        sdir = root / name
        sdir.mkdir(parents=True, exist_ok=True)

        video_rows, video_idx, offset = [], [], 0
        for vid, rec in split.videos.items():
            video_rows.append(rec.frames)
            video_idx.append({"video_id": vid, "row_offset": offset, "rows": rec.num_frames,
                              "source_fps": rec.source_fps})
            offset += rec.num_frames
        n_video_rows = _write_f32(sdir / "videos.bin", video_rows, dim)

        lang_rows, records, offset = [], [], 0
        for inst in split.instances:
            if isinstance(inst, QAInstance):
                m = int(inst.candidates.shape[0])
                lang_rows += [inst.question, inst.candidates]
                records.append({"id": inst.instance_id, "video_id": inst.video_id,
                                "question_row": offset, "candidate_rows": [offset + 1, m],
                                "gt_index": int(inst.gt_index),
                                "hardness_label": inst.hardness_label, "category": inst.category})
                offset += 1 + m
            else:
                lang_rows.append(inst.text)
                records.append({"id": inst.instance_id, "video_id": inst.video_id,
                                "text_row": offset, "category": inst.category})
                offset += 1
        n_lang_rows = _write_f32(sdir / "language.bin", lang_rows, dim)

        with (sdir / "videos.idx.jsonl").open("w") as f:
            for r in video_idx:
                f.write(json.dumps(r) + "\n")
        with (sdir / "instances.jsonl").open("w") as f:
            for r in records:
                f.write(json.dumps(r) + "\n")
        entries.append(SplitEntry(
            name=name, instance_count=len(split.instances), video_count=len(split.videos),
            files={"videos": f"{name}/videos.bin", "video_index": f"{name}/videos.idx.jsonl",
                   "language": f"{name}/language.bin", "instances": f"{name}/instances.jsonl"},
            rows={"videos": n_video_rows, "language": n_lang_rows},
        ))
    manifest = DatasetManifest(FORMAT_VERSION, dim, dataset.task, dataset.normalized, entries)
    (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    return manifest


def load_dataset(root: str | os.PathLike, check_normalized: bool = True) -> Dataset:
    """Load and fully validate a dataset written by :func:`save_dataset`."""
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DataValidationError("missing manifest", mpath)
    try:
        manifest = DatasetManifest.from_json(json.loads(mpath.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataValidationError(f"malformed manifest: {e}", mpath) from e
    if manifest.format_version != FORMAT_VERSION:
        raise DataValidationError(f"unsupported format_version {manifest.format_version}", mpath)
    if manifest.task not in ("qa", "retrieval"):
        raise DataValidationError(f"unknown task {manifest.task!r}", mpath)
    dim = manifest.dim
    norm = manifest.normalized and check_normalized

    splits = {}
    for entry in manifest.splits:
        vpath = root / entry.files["videos"]
        lpath = root / entry.files["language"]
        vblob = _read_f32(vpath, entry.rows["videos"], dim)
        lblob = _read_f32(lpath, entry.rows["language"], dim)
        check_embeddings(vblob, norm, vpath)
        check_embeddings(lblob, norm, lpath)

        ipath = root / entry.files["video_index"]
        videos = {}
        for r in _read_jsonl(ipath):
            vid, off, n = r["video_id"], int(r["row_offset"]), int(r["rows"])
            if n < 1 or off < 0 or off + n > vblob.shape[0]:
                raise DataValidationError(f"row range [{off},{off + n}) out of bounds", ipath, vid)
            videos[vid] = VideoRecord(vid, vblob[off:off + n].copy(), r.get("source_fps"))
        if len(videos) != entry.video_count:
            raise DataValidationError(
                f"video_count {entry.video_count} != {len(videos)} indexed", ipath)

        inst_path = root / entry.files["instances"]
        instances = []
        for r in _read_jsonl(inst_path):
            iid = r.get("id")
            if r["video_id"] not in videos:
                raise DataValidationError(f"unknown video_id {r['video_id']!r}", inst_path, iid)
            if manifest.task == "qa":
                q = int(r["question_row"])
                start, m = (int(v) for v in r["candidate_rows"])
                if m < 2:
                    raise DataValidationError(f"need >= 2 candidates, got {m}", inst_path, iid)
                if q >= lblob.shape[0] or start + m > lblob.shape[0]:
                    raise DataValidationError("language rows out of bounds", inst_path, iid)
                gt = int(r["gt_index"])
                if not 0 <= gt < m:
                    raise DataValidationError(f"gt_index {gt} out of range [0, {m})", inst_path, iid)
                instances.append(QAInstance(iid, r["video_id"], lblob[q].copy(),
                                            lblob[start:start + m].copy(), gt,
                                            r.get("hardness_label"), r.get("category")))
            else:
                t = int(r["text_row"])
                if t >= lblob.shape[0]:
                    raise DataValidationError("text row out of bounds", inst_path, iid)
                instances.append(RetrievalPair(iid, r["video_id"], lblob[t].copy(), r.get("category")))
        if len(instances) != entry.instance_count:
            raise DataValidationError(
                f"instance_count {entry.instance_count} != {len(instances)} records", inst_path)
        splits[entry.name] = Split(entry.name, videos, instances)
    return Dataset(manifest.task, dim, splits, manifest.normalized)


def normalize_dataset(dataset: Dataset) -> Dataset:
    """L2-normalize every embedding row (the ingestion convention)."""
    f32 = lambda x: l2_normalize(x).astype(np.float32)
    splits = {}
    for name, s in dataset.splits.items():
        vids = {k: VideoRecord(v.video_id, f32(v.frames), v.source_fps) for k, v in s.videos.items()}
        insts = []
        for i in s.instances:
            if isinstance(i, QAInstance):
                insts.append(QAInstance(i.instance_id, i.video_id, f32(i.question), f32(i.candidates),
                                        i.gt_index, i.hardness_label, i.category))
            else:
                insts.append(RetrievalPair(i.instance_id, i.video_id, f32(i.text), i.category))
        splits[name] = Split(name, vids, insts)
    return Dataset(dataset.task, dataset.dim, splits, True)


def ingest(src_root, dst_root) -> Dataset:
    """Import externally computed embeddings (same layout, any norm) and normalize them."""
    ds = normalize_dataset(load_dataset(src_root, check_normalized=False))
    save_dataset(ds, dst_root)
    return ds


# --------------------------------------------------------------------------
# Synthetic generators
# --------------------------------------------------------------------------


def _unit(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return l2_normalize(rng.standard_normal(shape))


def _noisy(rng, v: np.ndarray, scale: float) -> np.ndarray:
    return l2_normalize(v + scale * _unit(rng, v.shape[-1]))


def synth_easy(num_videos: int, frames_per_video: int = 16, m_candidates: int = 5, dim: int = 64,
               noise_scale: float = 0.3, rng_seed: int = 0, name: str = "train",
               id_prefix: str = "easy") -> Split:
    """Instances answerable from one informative frame.

    Every other frame is a random unit vector. Each instance is regenerated until
    its informative frame scores the ground-truth candidate highest.
    """
    if dim < 8 or frames_per_video < 2 or m_candidates < 2 or num_videos < 0:
        raise ValueError("synth_easy needs dim >= 8, frames_per_video >= 2, m_candidates >= 2")
    rng = np.random.default_rng(rng_seed)
    split = Split(name)
    for v in range(num_videos):
        while True:
            cands = _unit(rng, m_candidates, dim)
            gt = int(rng.integers(m_candidates))
            frames = _unit(rng, frames_per_video, dim)
            pos = int(rng.integers(frames_per_video))
            frames[pos] = _noisy(rng, cands[gt], noise_scale)
            question = _noisy(rng, cands[gt], noise_scale)
            if int(np.argmax(cands @ frames[pos])) == gt:
                break
        vid = f"{id_prefix}-{v:06d}"
        split.videos[vid] = VideoRecord(vid, frames.astype(np.float32))
        split.instances.append(QAInstance(vid, vid, question.astype(np.float32),
                                          cands.astype(np.float32), gt, SINGLE_FRAME))
    return split


def synth_hard(num_videos: int, frames_per_video: int = 16, dim: int = 64, noise_scale: float = 0.3,
               rng_seed: int = 0, name: str = "train", id_prefix: str = "hard") -> Split:
    """Instances whose answer depends on the temporal order of two events.

    The two event frames sit in opposite halves of the video; the candidates are
    ``normalize(e_first - e_second)`` (correct), its negation, and three
    differences of unrelated event pairs. A single event frame always prefers
    the pair candidate pointing towards itself, whatever the true order is.
    """
    if dim < 8 or frames_per_video < 4 or num_videos < 0:
        raise ValueError("synth_hard needs dim >= 8 and frames_per_video >= 4")
    rng = np.random.default_rng(rng_seed)
    half = frames_per_video // 2
    split = Split(name)
    for v in range(num_videos):
        while True:
            e1, e2 = _unit(rng, 2, dim)
            e1_first = bool(rng.integers(2))
            first, second = (e1, e2) if e1_first else (e2, e1)
            frames = _unit(rng, frames_per_video, dim)
            p_first = int(rng.integers(half))
            p_second = int(rng.integers(half, frames_per_video))
            frames[p_first] = _noisy(rng, first, noise_scale)
            frames[p_second] = _noisy(rng, second, noise_scale)
            pair = l2_normalize(np.stack([first - second, second - first]))
            others = _unit(rng, 3, 2, dim)
            distract = l2_normalize(others[:, 0] - others[:, 1])
            # each event frame must vote for "its own" order candidate
            if (pair[0] @ frames[p_first] > pair[1] @ frames[p_first]
                    and pair[1] @ frames[p_second] > pair[0] @ frames[p_second]):
                break
        cands = np.concatenate([pair, distract], axis=0)
        perm = rng.permutation(5)
        cands = cands[perm]
        gt = int(np.flatnonzero(perm == 0)[0])
        question = l2_normalize(e1 + e2)
        vid = f"{id_prefix}-{v:06d}"
        split.videos[vid] = VideoRecord(vid, frames.astype(np.float32))
        split.instances.append(QAInstance(vid, vid, question.astype(np.float32),
                                          cands.astype(np.float32), gt, MULTI_FRAME))
    return split


def synth_retrieval(num_videos: int, frames_per_video: int = 16, dim: int = 64,
                    noise_scale: float = 0.3, rng_seed: int = 0, name: str = "train",
                    id_prefix: str = "ret") -> Split:
    """Text-video pairs: each video holds one frame close to its caption embedding."""
    if dim < 8 or frames_per_video < 2:
        raise ValueError("synth_retrieval needs dim >= 8 and frames_per_video >= 2")
    rng = np.random.default_rng(rng_seed)
    split = Split(name)
    for v in range(num_videos):
        concept = _unit(rng, dim)
        frames = _unit(rng, frames_per_video, dim)
        frames[int(rng.integers(frames_per_video))] = _noisy(rng, concept, noise_scale)
        text = _noisy(rng, concept, noise_scale)
        vid = f"{id_prefix}-{v:06d}"
        split.videos[vid] = VideoRecord(vid, frames.astype(np.float32))
        split.instances.append(RetrievalPair(vid, vid, text.astype(np.float32)))
    return split


def merge_splits(name: str, *parts: Split) -> Split:
    out = Split(name)
    for p in parts:
        dup = out.videos.keys() & p.videos.keys()
        if dup:
            raise ValueError(f"duplicate video ids when merging: {sorted(dup)[:3]}")
        out.videos.update(p.videos)
        out.instances.extend(p.instances)
    return out


PRESETS = ("easy", "hard", "mixed", "retrieval")


def make_synthetic(preset: str, n_train: int = 2000, n_val: int = 500, frames_per_video: int = 16,
                   m_candidates: int = 5, dim: int = 64, noise_scale: float = 0.3,
                   seed: int = 0) -> Dataset:
    """Build a train/val dataset for one of :data:`PRESETS`.

    ``mixed`` is a 50/50 easy/hard blend, shuffled deterministically.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    ss = np.random.SeedSequence(seed).spawn(4)
    seeds = [int(s.generate_state(1)[0]) for s in ss]
    splits = {}
    for (name, n), s_easy, s_hard in zip((("train", n_train), ("val", n_val)), seeds[:2], seeds[2:]):
        if preset == "easy":
            splits[name] = synth_easy(n, frames_per_video, m_candidates, dim, noise_scale, s_easy, name,
                                      f"{name}-easy")
        elif preset == "hard":
            splits[name] = synth_hard(n, frames_per_video, dim, noise_scale, s_hard, name, f"{name}-hard")
        elif preset == "retrieval":
            splits[name] = synth_retrieval(n, frames_per_video, dim, noise_scale, s_easy, name,
                                           f"{name}-ret")
        else:
            n_easy = n // 2
            easy = synth_easy(n_easy, frames_per_video, m_candidates, dim, noise_scale, s_easy, name,
                              f"{name}-easy")
            hard = synth_hard(n - n_easy, frames_per_video, dim, noise_scale, s_hard, name, f"{name}-hard")
            merged = merge_splits(name, easy, hard)
            order = np.random.default_rng(s_easy ^ s_hard).permutation(len(merged.instances))
            merged.instances = [merged.instances[i] for i in order]
            splits[name] = merged
    task = "retrieval" if preset == "retrieval" else "qa"
    return Dataset(task, dim, splits, True)


def kfold_split(n_or_items: int | Sequence, k: int, rng_seed: int = 0) -> list[np.ndarray]:
    """Partition indices ``0..N-1`` into ``k`` shuffled folds whose sizes differ by at most one."""
    n = n_or_items if isinstance(n_or_items, int) else len(n_or_items)
    if not 2 <= k <= n:
        raise ValueError(f"k must satisfy 2 <= k <= {n}, got {k}")
    perm = np.random.default_rng(rng_seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]
