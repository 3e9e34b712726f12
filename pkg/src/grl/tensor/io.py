"""GRLT binary tensor records.

Layout: ``b"GRLT"``, u8 version (1), u8 dtype code (0=f32, 1=f64), u8 rank,
``rank`` little-endian u64 extents, then the row-major values little-endian.
"""

import struct

import numpy as np

MAGIC = b"GRLT"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_FROM_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def encode_tensor(arr):
    arr = np.asarray(getattr(arr, "data", arr))
    code = _CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"cannot encode dtype {arr.dtype}")
    head = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr).astype(_FROM_CODE[code], copy=False).tobytes()


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated GRLT record")
    return buf


def read_record(fh):
    """Read one GRLT record from a binary stream."""
    if _read_exact(fh, 4) != MAGIC:
        raise FormatError("bad GRLT magic")
    version, code, rank = struct.unpack("<BBB", _read_exact(fh, 3))
    if version != VERSION:
        raise FormatError(f"unsupported GRLT version {version}")
    if code not in _FROM_CODE:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    dt = _FROM_CODE[code]
    count = int(np.prod(shape, dtype=np.int64))
    raw = _read_exact(fh, count * dt.itemsize)
    return np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(shape)


def write_tensor(path, arr):
    from ..fileio import atomic_write_bytes

    atomic_write_bytes(path, encode_tensor(arr))


def read_tensor(path):
    with open(path, "rb") as fh:
        return read_record(fh)
