"""Versioned checkpoint files.

Layout: 8-byte little-endian header length, UTF-8 JSON header, then every
tensor as raw little-endian float32 in the order listed under ``tensors``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

CHECKPOINT_VERSION = 1


def save_checkpoint(path, kind: str, config: dict, tensors: dict[str, torch.Tensor],
                    step: int = 0, **meta) -> None:
    names = list(tensors)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "step": int(step),
        "tensors": [{"name": k, "shape": list(tensors[k].shape)} for k in names],
        **meta,
    }
    hbytes = json.dumps(header).encode()
    payload = b"".join(
        tensors[k].detach().cpu().numpy().astype("<f4").tobytes(order="C") for k in names
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(struct.pack("<Q", len(hbytes)) + hbytes + payload)


def load_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + hlen].decode())
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    offset = 8 + hlen
    tensors = {}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(raw):
            raise ValueError(f"{path}: payload shorter than declared tensor {spec['name']}")
        arr = np.frombuffer(raw[offset:end], dtype="<f4").reshape(spec["shape"])
        tensors[spec["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return header, tensors
