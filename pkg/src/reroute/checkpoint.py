"""Versioned binary checkpoint container.

Layout: magic "RRT1" | u32 version | u64 manifest length | manifest JSON |
raw little-endian buffers. The manifest lists name/dtype/shape/offset/nbytes
per buffer (model parameters and running statistics alike) plus a free-form
JSON metadata dict. Offsets are relative to the start of the data section.
Round-trips are bit-exact.
"""
from __future__ import annotations

import json
import struct
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import CheckpointError

MAGIC = b"RRT1"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def save_checkpoint(path, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({
            "name": name,
            "dtype": le.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"version": VERSION, "meta": meta or {}, "entries": entries},
                          sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(manifest)))
        f.write(manifest)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise CheckpointError(f"truncated checkpoint header in {path}")
        magic, version, mlen = _HEADER.unpack(head)
        if magic != MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
        manifest_raw = f.read(mlen)
        if len(manifest_raw) != mlen:
            raise CheckpointError("truncated checkpoint manifest")
        try:
            manifest = json.loads(manifest_raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"unreadable checkpoint manifest: {e}") from e
        data = f.read()
    arrays = {}
    for e in manifest["entries"]:
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"buffer {e['name']!r} overruns checkpoint data section")
        arr = np.frombuffer(data[lo:hi], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays, manifest.get("meta", {})
