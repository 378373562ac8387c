"""Flat binary container for named arrays.

Layout: the 8-byte magic ``DUALNET1`` followed by records, each::

    u32 name_len | name (utf-8) | u8 dtype tag | u32 rank | u32 extents[rank] | raw LE values

All integers are little-endian. Dtype tags: 0=float32, 1=float64, 2=int64.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DUALNET1"

_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_DTYPES = {v: k for k, v in _TAGS.items()}


class FormatError(ValueError):
    """Malformed or truncated binary file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        else:
            arr = arr.astype("<i8", copy=False)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:8] != MAGIC:
        raise FormatError(f"bad magic {buf[:8]!r}, expected {MAGIC!r}", 0)
    out: dict[str, np.ndarray] = {}
    pos = 8
    end = len(buf)

    def need(n: int, what: str) -> None:
        if pos + n > end:
            raise FormatError(f"truncated while reading {what}", pos)

    while pos < end:
        need(4, "name length")
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(name_len, "name")
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        need(5, f"header of {name!r}")
        tag, rank = struct.unpack_from("<BI", buf, pos)
        pos += 5
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag} for {name!r}", pos - 5)
        need(4 * rank, f"extents of {name!r}")
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        need(nbytes, f"values of {name!r}")
        out[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    return out


def save(path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(arrays))


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
