"""Flat binary container of named float64 tensors.

Layout (all integers little-endian)::

    magic      8 bytes   b"DDTRCKPT"
    version    uint32    currently 1
    meta_len   uint32    length of the UTF-8 JSON metadata blob
    meta       bytes     JSON object (config, counters); may be "{}"
    count      uint32    number of tensor records
    record * count:
        name_len  uint16
        name      UTF-8 bytes
        ndim      uint8
        shape     ndim * uint32
        data      prod(shape) * float64 (little-endian, row-major)

Records are written in the order given, so identical inputs give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DDTRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 8
    version, meta_len = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"truncated data for tensor {name}")
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor record")
    return tensors, meta


def save(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
