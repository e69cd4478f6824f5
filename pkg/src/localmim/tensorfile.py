"""The LMIM tensor container.

Layout, all integers little-endian::

    b"LMIM" | version u32 | entry count u32
    per entry: name length u32 | UTF-8 name | dtype u8 (0=f32, 1=f64)
               | rank u8 | dims u64 * rank | raw payload

Entries keep insertion order, so writing the same mapping twice produces the
same bytes.
"""
from __future__ import annotations

import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LMIM"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class TensorFileError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise TensorFileError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TensorFileError(f"truncated file while reading {what} at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise TensorFileError("not an LMIM tensor file (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise TensorFileError(f"unsupported tensor file version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for i in range(count):
        (n,) = struct.unpack("<I", take(4, f"entry {i} name length"))
        try:
            name = bytes(take(n, f"entry {i} name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TensorFileError(f"entry {i}: name is not UTF-8") from exc
        code, rank = struct.unpack("<BB", take(2, f"entry {name!r} dtype"))
        if code not in _DTYPES:
            raise TensorFileError(f"entry {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"entry {name!r} dims"))
        dtype = _DTYPES[code]
        size = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
        payload = take(size, f"entry {name!r} payload")
        if name in out:
            raise TensorFileError(f"duplicate entry name {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise TensorFileError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, dumps(tensors))


def load(path) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())
