"""Bit-exact binary tensor container.

Layout (little-endian, no alignment padding):

    magic   "GTNS"         4 bytes
    version u16 = 1
    dtype   u8             0 = float32, 1 = float64
    ndim    u8
    dims    u32 * ndim
    payload row-major raw scalars

Read errors carry the byte offset at which the problem was detected; a
truncated file never yields a partial tensor.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"GTNS"
VERSION = 1

_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """Container violates the format; ``offset`` locates the defect."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"byte {offset}: {message}")
        self.offset = offset


def write_record(fp: BinaryIO, arr: np.ndarray) -> None:
    """Append one tensor record to an open binary stream."""
    arr = np.ascontiguousarray(np.atleast_1d(arr))
    code = _DTYPE_CODE.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    fp.write(MAGIC)
    fp.write(struct.pack("<HBB", VERSION, code, arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_record(fp: BinaryIO) -> np.ndarray:
    """Read one tensor record; leaves the stream at the following byte."""
    base = fp.tell()

    def need(n: int, what: str) -> bytes:
        buf = fp.read(n)
        if len(buf) != n:
            raise FormatError(fp.tell(), f"truncated while reading {what}")
        return buf

    magic = need(4, "magic")
    if magic != MAGIC:
        raise FormatError(base, f"bad magic {magic!r} (expected {MAGIC!r})")
    version, code, ndim = struct.unpack("<HBB", need(4, "header"))
    if version != VERSION:
        raise FormatError(base + 4, f"unsupported version {version}")
    if code not in _CODE_DTYPE:
        raise FormatError(base + 6, f"unknown dtype code {code}")
    if ndim == 0:
        raise FormatError(base + 7, "ndim must be >= 1")
    dims = struct.unpack(f"<{ndim}I", need(4 * ndim, "dims"))
    dtype = _CODE_DTYPE[code]
    count = int(np.prod(dims, dtype=np.int64))
    payload = fp.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError(base + 8 + 4 * ndim + len(payload), "truncated payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, arr: np.ndarray) -> None:
    path = Path(path)
    with open(path, "wb") as fp:
        write_record(fp, arr)


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fp:
        arr = read_record(fp)
        trailing = fp.read(1)
        if trailing:
            raise FormatError(fp.tell() - 1, "trailing bytes after payload")
    return arr
