"""``FTR1`` binary tensor container.

Layout: magic ``b"FTR1"``, rank as little-endian uint32, one uint32 per
extent, then float64 little-endian data in row-major order.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"FTR1"


class FormatError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) - offset != 8 * count:
        raise FormatError(f"payload is {len(blob) - offset} bytes, expected {8 * count}")
    return np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)


def write_tensor(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
