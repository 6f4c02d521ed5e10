"""FTEN binary tensor files.

Layout: magic bytes ``FTEN``, one u8 dtype code (0 = float64), u32
little-endian ndim, ndim u32 little-endian dims, then the raw row-major
little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import NumericError, ShapeError

MAGIC = b"FTEN"
DTYPE_F64 = 0


def write_ften(path: str | Path, array: np.ndarray) -> None:
    """Write ``array`` as float64 FTEN. Entries must be finite."""
    arr = np.ascontiguousarray(array, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NumericError(f"refusing to persist non-finite tensor to {path}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", DTYPE_F64))
        fh.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack("<I", d))
        fh.write(arr.astype("<f8").tobytes(order="C"))


def read_ften(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ShapeError(f"{path}: bad magic {magic!r}")
        (dtype_code,) = struct.unpack("<B", fh.read(1))
        if dtype_code != DTYPE_F64:
            raise ShapeError(f"{path}: unsupported dtype code {dtype_code}")
        (ndim,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
        n = 1
        for d in dims:
            n *= d
        payload = fh.read(8 * n)
        if len(payload) != 8 * n:
            raise ShapeError(f"{path}: truncated payload")
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    return arr
