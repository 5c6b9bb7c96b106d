"""Flat tensor checkpoint format.

Layout::

    [8 bytes]  little-endian uint64: length N of the JSON manifest
    [N bytes]  UTF-8 JSON manifest
    [rest]     concatenated little-endian float32 payloads

The manifest holds ``format``, ``geometry`` (free-form dict) and ``tensors``:
``{name: {"shape": [...], "offset": int, "nbytes": int}}`` with offsets
relative to the start of the payload section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

FORMAT = "fewseg-ckpt/1"
_LE_F32 = np.dtype("<f4")


def save_tensors(path, tensors: Mapping[str, torch.Tensor], geometry: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].detach().cpu().numpy(), dtype=_LE_F32)
        raw = arr.tobytes()
        entries[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "geometry": geometry or {}, "tensors": entries}
    if extra:
        manifest["extra"] = extra
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    return path


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(n).decode("utf-8"))
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    return manifest


def load_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    data = path.read_bytes()
    (n,) = struct.unpack("<Q", data[:8])
    manifest = json.loads(data[8:8 + n].decode("utf-8"))
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    base = 8 + n
    out = {}
    for name, e in manifest["tensors"].items():
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype=_LE_F32, count=e["nbytes"] // 4, offset=start)
        out[name] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return out, manifest
