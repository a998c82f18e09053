"""Binary tensor files and named-tensor checkpoints.

Single tensor ("MGT1"): magic, u32 rank, rank x u64 extents, row-major
little-endian f64 payload.

Checkpoint ("MGTC"): magic, u32 entry count, then per entry a u32 name length,
the UTF-8 name and an MGT1 record. Entries are written in sorted key order so
identical parameters give identical bytes.
"""
from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

TENSOR_MAGIC = b"MGT1"
CHECKPOINT_MAGIC = b"MGTC"


class FormatError(ValueError):
    pass


def write_tensor(f: BinaryIO, arr) -> None:
    arr = np.asarray(arr, dtype="<f8")
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("truncated tensor record")
    return buf


def read_tensor(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8")
    return data.reshape(shape).astype(np.float64)


def save_tensor(path: str | os.PathLike, arr) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def tensor_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            write_tensor(f, tensors[name])


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, n).decode("utf-8")
            out[name] = read_tensor(f)
        if f.read(1):
            raise FormatError("trailing bytes after checkpoint")
    return out
