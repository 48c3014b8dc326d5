"""Flat binary container for named float64 arrays.

Layout (all integers little-endian)::

    magic        4 bytes  b"DCKP"
    version      u32
    meta_len     u32, then meta_len bytes of UTF-8 JSON (config and extras)
    count        u32
    count times:
        name_len u32, name bytes (UTF-8)
        rank     u32, rank x u64 dims
        prod(dims) x f64 values, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"DCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_arrays(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        dump_arrays(fh, arrays, meta)


def dump_arrays(fh: BinaryIO, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(meta_bytes)))
    fh.write(meta_bytes)
    fh.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode()
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, meta)`` from a file written by :func:`write_arrays`."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    meta = json.loads(take(meta_len).decode())
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return arrays, meta
