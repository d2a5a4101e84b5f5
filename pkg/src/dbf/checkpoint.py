"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"DBFCKPT\\0"
    version      uint32    currently 1
    manifest_len uint64
    manifest     manifest_len bytes of UTF-8 JSON (sorted keys)
    count        uint32    number of tensors
    per tensor, in ascending name order:
        name_len uint32, name (UTF-8)
        ndim     uint32, ndim x uint64 extents
        payload  prod(extents) x float64, row-major

The manifest holds the training config and the data geometry needed to
rebuild the model. Nothing time- or host-dependent is stored, so identical
runs produce identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from dbf.errors import SchemaError

MAGIC = b"DBFCKPT\x00"
VERSION = 1


def encode(tensors: dict[str, np.ndarray], manifest: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<Q", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        parts += [struct.pack("<Q", n) for n in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise SchemaError("checkpoint is truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise SchemaError("not a dbf checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise SchemaError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<Q", take(8))
    manifest = json.loads(bytes(take(mlen)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise SchemaError("trailing bytes after checkpoint payload")
    return tensors, manifest


def save(path, tensors: dict[str, np.ndarray], manifest: dict) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors, manifest))
    os.replace(tmp, path)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
