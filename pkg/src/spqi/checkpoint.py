"""Versioned binary container for named float64 tensors.

Layout, all integers little-endian::

    b"SPQ1"                 magic
    u32                     format version
    u64                     metadata length in bytes
    metadata                UTF-8 JSON, sorted keys, compact separators
    sections                raw float64 LE, concatenated in directory order

The metadata holds caller fields plus ``sections``: a list of
``{"name", "shape", "offset", "length"}`` with offsets relative to the
first section byte. Serialization is canonical, so load then save gives
back identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SPQ1"
VERSION = 1
_HEAD = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False).encode("utf-8")


def encode(arrays: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> bytes:
    meta = dict(metadata or {})
    if "sections" in meta:
        raise CheckpointError("metadata key 'sections' is reserved")
    directory = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        if a.dtype.kind not in "fiub":
            raise CheckpointError(f"tensor {name!r} is not numeric")
        raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(a.shape), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    meta["sections"] = directory
    blob = _canonical(meta)
    return _HEAD.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < _HEAD.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, meta_len = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"incompatible checkpoint version {version}; this build reads version {VERSION}")
    start = _HEAD.size + meta_len
    if start > len(data):
        raise CheckpointError("truncated metadata block")
    meta = json.loads(data[_HEAD.size:start].decode("utf-8"))
    directory = meta.pop("sections", None)
    if not isinstance(directory, list):
        raise CheckpointError("metadata has no section directory")
    arrays: dict[str, np.ndarray] = {}
    expected = 0
    for sec in directory:
        shape = tuple(sec["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if sec["offset"] != expected or sec["length"] != n:
            raise CheckpointError(f"section {sec['name']!r}: inconsistent offset/length")
        lo = start + sec["offset"]
        if lo + n > len(data):
            raise CheckpointError(f"section {sec['name']!r} runs past end of file")
        arrays[sec["name"]] = np.frombuffer(data, dtype="<f8", count=n // 8, offset=lo).astype(np.float64).reshape(shape)
        expected += n
    if start + expected != len(data):
        raise CheckpointError("trailing bytes after last section")
    return arrays, meta


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> None:
    Path(path).write_bytes(encode(arrays, metadata))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
