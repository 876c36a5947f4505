"""Binary tensor persistence.

Layout: 4 magic bytes ``UTSR``, one u8 format version (currently 1), one u8
rank, then ``rank`` u64 little-endian dimensions, then the payload as f32
little-endian in row-major order. Multiple records may be concatenated in a
single stream; readers consume exactly one record per call.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"UTSR"
VERSION = 1
MAX_RANK = 8


class FormatError(ValueError):
    """Stream contents do not form a valid tensor record."""


def write_tensor(stream: BinaryIO, array: np.ndarray) -> None:
    """Append one tensor record to a binary stream."""
    array = np.asarray(array)
    if array.ndim > MAX_RANK:
        raise FormatError(f"rank {array.ndim} exceeds limit {MAX_RANK}")
    stream.write(MAGIC)
    stream.write(struct.pack("<BB", VERSION, array.ndim))
    for dim in array.shape:
        stream.write(struct.pack("<Q", dim))
    stream.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_tensor(stream: BinaryIO) -> np.ndarray:
    """Consume one tensor record; returns float64 for downstream math."""
    head = stream.read(6)
    if len(head) < 6:
        raise FormatError("truncated header")
    if head[:4] != MAGIC:
        raise FormatError(f"bad magic {head[:4]!r}")
    version, rank = head[4], head[5]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if rank > MAX_RANK:
        raise FormatError(f"rank {rank} exceeds limit {MAX_RANK}")
    dims = []
    for _ in range(rank):
        raw = stream.read(8)
        if len(raw) < 8:
            raise FormatError("truncated dimension list")
        dims.append(struct.unpack("<Q", raw)[0])
    count = 1
    for d in dims:
        count *= d
    payload = stream.read(4 * count)
    if len(payload) < 4 * count:
        raise FormatError(f"truncated payload: wanted {4 * count} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4", count=count)
    return data.astype(np.float64).reshape(dims)


def save_tensors(path, arrays: dict[str, np.ndarray], header: dict | None = None) -> None:
    """Write a named tensor bundle: one JSON header line, then the records.

    The header's ``tensors`` key lists record names in stream order; extra
    caller-supplied metadata rides along untouched.
    """
    import json

    meta = dict(header or {})
    meta["tensors"] = list(arrays.keys())
    with open(path, "wb") as f:
        f.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        for a in arrays.values():
            write_tensor(f, a)


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a bundle written by ``save_tensors``; returns (header, tensors)."""
    import json

    with open(path, "rb") as f:
        line = f.readline()
        try:
            meta = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"bad bundle header: {e}") from e
        arrays = {name: read_tensor(f) for name in meta["tensors"]}
    return meta, arrays
