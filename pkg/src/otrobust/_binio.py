"""Little-endian binary IO helpers shared by the dataset/atlas/checkpoint codecs."""

import struct

import numpy as np

from .errors import DataFormatError


def write_u8(f, value: int) -> None:
    f.write(struct.pack("<B", value))


def write_u32(f, value: int) -> None:
    f.write(struct.pack("<I", value))


def write_u64(f, value: int) -> None:
    f.write(struct.pack("<Q", value))


def read_exact(f, count: int) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise DataFormatError(f"truncated file: expected {count} bytes, got {len(data)}")
    return data


def read_u8(f) -> int:
    return struct.unpack("<B", read_exact(f, 1))[0]


def read_u32(f) -> int:
    return struct.unpack("<I", read_exact(f, 4))[0]


def read_u64(f) -> int:
    return struct.unpack("<Q", read_exact(f, 8))[0]


_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODE_FOR_KIND = {"f": 0, "i": 1}


def write_array(f, arr: np.ndarray) -> None:
    """Shape-prefixed array record: dtype code, ndim, dims, raw little-endian data."""
    code = _CODE_FOR_KIND.get(arr.dtype.kind)
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    out = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code])
    write_u8(f, code)
    write_u8(f, out.ndim)
    for dim in out.shape:
        write_u64(f, dim)
    f.write(out.tobytes())


def read_array(f) -> np.ndarray:
    code = read_u8(f)
    if code not in _DTYPE_CODES:
        raise DataFormatError(f"unknown array dtype code {code}")
    ndim = read_u8(f)
    shape = tuple(read_u64(f) for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    dtype = _DTYPE_CODES[code]
    raw = read_exact(f, count * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def check_magic(f, expected: bytes, what: str) -> None:
    got = f.read(len(expected))
    if got != expected:
        raise DataFormatError(f"bad magic for {what}: {got!r}")
