"""Versioned little-endian binary container for named arrays plus a JSON header.

Layout::

    magic 4s | version u16 | meta_len u32 | meta (utf-8 JSON) | count u32
    per array: name_len u16 | name | dtype u8 | ndim u8 | dims u32 * ndim | raw bytes
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .coding import FormatError

VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


def write_container(magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    raw_meta = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<4sHI", magic, VERSION, len(raw_meta)), raw_meta, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def read_container(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(data)

    def need(off, n, what):
        if off + n > len(view):
            raise FormatError(f"truncated {what}", off)

    need(0, 10, "header")
    got, version, meta_len = struct.unpack_from("<4sHI", view, 0)
    if got != magic:
        raise FormatError(f"bad magic {bytes(got)!r}, expected {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = 10
    need(off, meta_len + 4, "metadata")
    meta = json.loads(bytes(view[off : off + meta_len]).decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    arrays = {}
    for _ in range(count):
        need(off, 2, "array record")
        (name_len,) = struct.unpack_from("<H", view, off)
        off += 2
        need(off, name_len + 2, "array record")
        name = bytes(view[off : off + name_len]).decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", view, off)
        off += 2
        if code not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}", off - 2)
        need(off, 4 * ndim, f"shape of {name!r}")
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        need(off, nbytes, f"data of {name!r}")
        arrays[name] = np.frombuffer(view[off : off + nbytes], dtype=dt).reshape(shape).copy()
        off += nbytes
    if off != len(view):
        raise FormatError("trailing bytes", off)
    return meta, arrays
