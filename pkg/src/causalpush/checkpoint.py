"""Checkpoint files: one JSON header line, then a flat little-endian float array.

Layout::

    CAUSALPUSH-CKPT <schema_version>\\n
    {"kind": ..., "dtype": "<f8", "arrays": [{"name", "shape"}...], "meta": {...}}\\n
    <raw bytes of every array, concatenated in header order>
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "CAUSALPUSH-CKPT"
SCHEMA_VERSION = 1
_DTYPES = ("<f4", "<f8")


class CheckpointError(ValueError):
    """Malformed, mismatched or unsupported checkpoint."""


def save_arrays(path, kind, arrays, meta=None, dtype="<f8"):
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {dtype!r}")
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    header = {"kind": kind, "dtype": dtype, "arrays": entries, "meta": meta or {}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {SCHEMA_VERSION}\n".encode())
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for blob in blobs:
            fh.write(blob)
    return path


def load_arrays(path, kind=None):
    """Return ``(arrays, meta)``; raises :class:`CheckpointError` on any inconsistency."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    first = raw.find(b"\n")
    second = raw.find(b"\n", first + 1)
    if first < 0 or second < 0:
        raise CheckpointError(f"{path}: missing header")
    try:
        magic, version = raw[:first].decode().split()
        header = json.loads(raw[first + 1:second].decode())
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(version) != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: holds a {header.get('kind')!r}, expected {kind!r}")
    dtype = np.dtype(header.get("dtype", ""))
    if dtype.str not in _DTYPES:
        raise CheckpointError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    body = raw[second + 1:]
    arrays = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated payload")
        chunk = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        arrays[entry["name"]] = chunk.astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    return arrays, header.get("meta", {})
