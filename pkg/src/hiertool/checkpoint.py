"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    b"HTCK"               magic
    uint32                format version
    uint64                index length in bytes
    <index>               UTF-8 JSON: {"meta": {...}, "tensors": [{name, shape, offset, count}]}
    <data>                float32 little-endian, tensors back to back

The JSON index is written with sorted keys so identical models produce
identical bytes.
"""
from __future__ import annotations

import json
import struct
from os import PathLike
from typing import Mapping

import numpy as np

MAGIC = b"HTCK"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.asarray(arr, dtype="<f4")
        entries.append(
            {"name": name, "shape": list(data.shape), "offset": offset, "count": int(data.size)}
        )
        blobs.append(data.tobytes())
        offset += data.nbytes
    index = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    return _HEADER.pack(MAGIC, VERSION, len(index)) + index + b"".join(blobs)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < _HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, n_index = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _HEADER.size
    index = json.loads(buf[start : start + n_index].decode())
    body = memoryview(buf)[start + n_index :]
    out = {}
    for e in index["tensors"]:
        lo = e["offset"]
        hi = lo + 4 * e["count"]
        if hi > len(body):
            raise CheckpointError(f"tensor {e['name']!r} runs past end of file")
        arr = np.frombuffer(body[lo:hi], dtype="<f4").reshape(tuple(e["shape"]))
        out[e["name"]] = arr.copy()
    return out, index["meta"]


def save(path: str | PathLike, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors, meta))


def load(path: str | PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())
