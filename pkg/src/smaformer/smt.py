"""SMT1 binary tensor files.

Layout: ``b"SMT1"``, one dtype byte (1 = f32, 2 = f64), one ndim byte, ``ndim``
little-endian u32 dimensions, then the row-major little-endian payload. No
padding, so identical arrays always serialise to identical bytes.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"SMT1"
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """Malformed SMT1 data; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    code = _DTYPE_CODE.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise TypeError(f"SMT1 stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("SMT1 supports at most 255 dimensions")
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 6:
        raise FormatError("truncated header", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    code, ndim = buf[4], buf[5]
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}", 4)
    end = 6 + 4 * ndim
    if len(buf) < end:
        raise FormatError(f"truncated dimension list ({ndim} dims declared)", len(buf))
    dims = struct.unpack(f"<{ndim}I", buf[6:end])
    dtype = _CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = len(buf) - end
    if payload != expected:
        raise FormatError(f"payload is {payload} bytes, shape {dims} needs {expected}",
                          end + min(payload, expected))
    return np.frombuffer(buf, dtype=dtype, offset=end).reshape(dims).astype(dtype.newbyteorder("="))


def save(path: PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path: PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())
