"""Flat binary container of named arrays.

Layout (little endian)::

    magic   4 bytes  b"EMBT"
    version u32
    count   u32
    count x record:
        name_len u16, name utf-8
        dtype    u8   (see _CODES)
        ndim     u8
        shape    ndim x u64
        payload  row-major values
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"EMBT"
VERSION = 1

_CODES = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.uint8, 4: np.int32}
_DTYPES = {np.dtype(v): k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in _DTYPES:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", _DTYPES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode("utf-8")
        off += n
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        dtype = np.dtype(_CODES[code]).newbyteorder("<")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        out[name] = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return out
