"""RTEN: a tiny little-endian container for named f64 / u32 tensors.

Layout::

    b"RTEN" | version u16 | count u32 |
    count x ( name_len u16 | utf-8 name | dtype u8 | ndim u8 | dims u32[ndim] | payload )

dtype 0 is float64, dtype 1 is uint32.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"RTEN"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<u4")}


class RtenError(Exception):
    code = "rten_error"


class BadMagicError(RtenError):
    code = "bad_magic"


class TruncatedError(RtenError):
    code = "truncated"


class DuplicateNameError(RtenError):
    code = "duplicate_name"


class UnsupportedError(RtenError):
    code = "unsupported"


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype.kind == "f":
        return 0
    if arr.dtype.kind in "ui":
        return 1
    raise UnsupportedError(f"cannot store dtype {arr.dtype}")


def dumps(tensors: Mapping[str, np.ndarray] | list[tuple[str, np.ndarray]]) -> bytes:
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise DuplicateNameError("tensor names must be unique")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(items)))
    for name, value in items:
        arr = np.asarray(value)
        code = _dtype_code(arr)
        if code == 1 and arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
            raise UnsupportedError(f"{name}: integer values outside u32 range")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise UnsupportedError(f"{name}: name or rank too large")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedError(f"need {n} bytes at offset {pos}, file has {len(view)}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(view[:4]) != MAGIC:
        raise BadMagicError("not an RTEN file")
    pos = 4
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise UnsupportedError(f"RTEN version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise UnsupportedError(f"{name}: dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = take(size * dt.itemsize)
        if name in out:
            raise DuplicateNameError(f"duplicate record {name!r}")
        arr = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        out[name] = arr
    if pos != len(view):
        raise RtenError(f"{len(view) - pos} trailing bytes")
    return out


def write_rten(path, tensors) -> None:
    Path(path).write_bytes(dumps(tensors))


def read_rten(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
