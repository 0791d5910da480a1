"""Raw tensor file format.

Layout (little-endian): magic ``OEMT``, u16 version, u16 rank, rank x u64
dims, u8 dtype tag (0 = f32, 1 = f64), then the packed row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"OEMT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class TensorFormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    tag = _TAGS.get(arr.dtype)
    if tag is None:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    head = MAGIC + struct.pack("<HH", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<B", tag)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, end offset)."""
    if buf[offset : offset + 4] != MAGIC:
        raise TensorFormatError("bad tensor magic")
    if len(buf) < offset + 8:
        raise TensorFormatError("truncated tensor header")
    version, rank = struct.unpack_from("<HH", buf, offset + 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported tensor version {version}")
    pos = offset + 8
    if len(buf) < pos + 8 * rank + 1:
        raise TensorFormatError("truncated tensor header")
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    (tag,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    if tag not in _DTYPES:
        raise TensorFormatError(f"unknown dtype tag {tag}")
    dtype = _DTYPES[tag]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise TensorFormatError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    return arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise TensorFormatError("trailing bytes after tensor payload")
    return arr
