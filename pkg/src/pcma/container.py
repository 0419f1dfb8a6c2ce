"""Binary tensor container (.pcmt): a tiny, bit-exact interchange format.

Layout: magic ``PCMT``, version byte (1), dtype byte, rank byte, then
rank little-endian uint64 extents, then the row-major payload.
Dtype codes: 1 = float32 LE, 2 = float64 LE, 3 = uint8.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["write_tensor", "read_tensor", "ContainerError"]

MAGIC = b"PCMT"
VERSION = 1

_CODE_FOR_DTYPE = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("u1"): 3,
}
_DTYPE_FOR_CODE = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}


class ContainerError(ValueError):
    """Malformed or mismatched container file."""


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.ndim:
        arr = np.ascontiguousarray(arr)
    if arr.dtype == np.float32:
        arr = arr.astype("<f4", copy=False)
    elif arr.dtype == np.float64:
        arr = arr.astype("<f8", copy=False)
    code = _CODE_FOR_DTYPE.get(arr.dtype)
    if code is None:
        raise ContainerError(f"unsupported dtype {array.dtype} for container file")
    if arr.ndim > 255:
        raise ContainerError("rank exceeds container limit")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 7 or raw[:4] != MAGIC:
        raise ContainerError(f"{path}: not a tensor container")
    version, code, rank = struct.unpack("<BBB", raw[4:7])
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    dtype = _DTYPE_FOR_CODE.get(code)
    if dtype is None:
        raise ContainerError(f"{path}: unknown dtype code {code}")
    offset = 7 + 8 * rank
    if len(raw) < offset:
        raise ContainerError(f"{path}: truncated header")
    shape = struct.unpack(f"<{rank}Q", raw[7:offset]) if rank else ()
    count = int(np.prod(shape, dtype=np.uint64)) if rank else 1
    payload = raw[offset:]
    if len(payload) != count * dtype.itemsize:
        raise ContainerError(f"{path}: payload length mismatch")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
