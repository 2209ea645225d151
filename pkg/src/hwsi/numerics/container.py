"""Binary tensor container shared by corpora, checkpoints and sequence exports.

Record layout (all integers little-endian)::

    b"HWSITNSR" | version u32 | dtype u8 (0=f32, 1=f64) | rank u8 | dims u64 * rank | payload

The payload is the row-major array in little-endian byte order.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from hwsi.errors import FormatError

MAGIC = b"HWSITNSR"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(fh: BinaryIO, array) -> int:
    """Write one record; returns the number of bytes written."""
    arr = np.asarray(array)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    if arr.ndim > 255:
        raise ValueError("rank exceeds 255")
    header = MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    fh.write(header)
    fh.write(payload)
    return len(header) + len(payload)


def _read_exact(fh, n, path, what):
    start = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}", path, start)
    return buf


def read_tensor(fh: BinaryIO, path=None) -> np.ndarray:
    """Read one record from the current position of ``fh``."""
    start = fh.tell()
    magic = _read_exact(fh, 8, path, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", path, start)
    version, code, rank = struct.unpack("<IBB", _read_exact(fh, 6, path, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", path, start + 8)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", path, start + 12)
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, path, "dims"))
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, count * dtype.itemsize, path, "payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FormatError("tensor file missing", path)
    with open(path, "rb") as fh:
        arr = read_tensor(fh, path)
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after tensor record", path, fh.tell() - 1)
    return arr


def tensor_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()
