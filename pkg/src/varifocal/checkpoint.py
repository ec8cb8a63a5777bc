"""Versioned binary container of named tensors.

Layout (little-endian)::

    magic  b"VFNC"  | version u16 | count u32
    per tensor: name_len u16, name utf-8, dtype u8, rank u8, extents u64 * rank, raw values
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"VFNC"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<u1")}
CODES = {v: k for k, v in DTYPES.items()}


class CheckpointError(ValueError):
    pass


def save(path, arrays: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        if le not in CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", CODES[le], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=le).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 10
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("utf-8")
            off += n
            code, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            dtype = DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if off + nbytes > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            out[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=off).reshape(shape).copy()
            off += nbytes
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return out
