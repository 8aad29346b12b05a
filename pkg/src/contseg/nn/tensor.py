"""Binary tensor format and small array helpers.

On-disk layout: magic ``CSTN``, one ``u8`` rank, ``rank`` little-endian
``u32`` extents, then the little-endian ``f32`` payload (row-major, width
fastest).
"""
from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

MAGIC = b"CSTN"
DTYPE = np.float32


class TensorFormatError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Raised when a forward/backward pass produces NaN or Inf."""


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise DivergenceError(f"non-finite values produced by {where}")
    return arr


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > 255:
        raise TensorFormatError("rank too large")
    fh.write(MAGIC)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise TensorFormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(shape)


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def checksum(arrays: Iterable[np.ndarray]) -> str:
    """sha256 over the float32 bytes of ``arrays`` in iteration order."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f4")
        h.update(struct.pack("<B", a.ndim))
        h.update(struct.pack(f"<{a.ndim}I", *a.shape))
        h.update(a.tobytes())
    return h.hexdigest()
