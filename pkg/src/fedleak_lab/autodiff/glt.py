"""GLT1 binary tensor files.

Layout: the magic bytes ``GLT1``, the rank as a little-endian u32, one u32
per extent, then the row-major payload as little-endian f64.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"GLT1"


class GLTFormatError(ValueError):
    pass


def encode(arr) -> bytes:
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode(buf: bytes | BinaryIO) -> np.ndarray:
    stream = io.BytesIO(buf) if isinstance(buf, (bytes, bytearray, memoryview)) else buf
    magic = stream.read(4)
    if magic != MAGIC:
        raise GLTFormatError(f"bad magic {magic!r}")
    raw = stream.read(4)
    if len(raw) != 4:
        raise GLTFormatError("truncated header")
    (rank,) = struct.unpack("<I", raw)
    raw = stream.read(4 * rank)
    if len(raw) != 4 * rank:
        raise GLTFormatError("truncated extents")
    shape = struct.unpack(f"<{rank}I", raw)
    count = int(np.prod(shape)) if rank else 1
    payload = stream.read(8 * count)
    if len(payload) != 8 * count:
        raise GLTFormatError("truncated payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def save(path, arr) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh)
