"""Arithmetic-coded mask archives.

Block indices are coded with a static uniform model over the ``C(m, n)``
candidates, so each block costs ``log2 C(m, n)`` bits plus a few bits of
coder termination per tensor.

Archive layout (little-endian)::

    "NMMK" | version u16 | n u8 | m u8 | tensor_count u32
    per tensor: name_len u16 | name utf-8 | rows u32 | cols u32 | payload_len u32 | payload

The dense interchange file uses the same layout with magic ``"NMMB"`` and a
payload of raw mask bits, row-major, least significant bit first.
"""

from __future__ import annotations

import struct
from math import comb, log2
from typing import Iterable, Sequence

import numpy as np

from .masks import LayerMask, PatternError, enumerate_candidates

MAGIC = b"NMMK"
DENSE_MAGIC = b"NMMB"
VERSION = 1

_HEADER = struct.Struct("<4sHBBI")
_DIMS = struct.Struct("<III")

STATE_BITS = 32
_FULL = 1 << STATE_BITS
_HALF = _FULL >> 1
_QUARTER = _HALF >> 1
_MASK = _FULL - 1


class FormatError(ValueError):
    """Malformed archive; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# range coder with a fixed uniform model
# ---------------------------------------------------------------------------


def encode_symbols(symbols: Iterable[int], alphabet: int) -> bytes:
    """Arithmetic-code ``symbols`` drawn uniformly from ``range(alphabet)``."""
    if not 1 <= alphabet <= _QUARTER:
        raise ValueError("alphabet size out of range for a 32-bit coder")
    low, high = 0, _MASK
    pending = 0
    bits: list[int] = []
    emit = bits.append
    for s in symbols:
        rng = high - low + 1
        high = low + (s + 1) * rng // alphabet - 1
        low = low + s * rng // alphabet
        while not (low ^ high) & _HALF:
            bit = low >> (STATE_BITS - 1)
            emit(bit)
            if pending:
                bits.extend([bit ^ 1] * pending)
                pending = 0
            low = (low << 1) & _MASK
            high = ((high << 1) & _MASK) | 1
        while low & ~high & _QUARTER:
            pending += 1
            low = (low << 1) ^ _HALF
            high = ((high ^ _HALF) << 1) | _HALF | 1
    emit(1)
    return np.packbits(np.array(bits, dtype=np.uint8)).tobytes()


def decode_symbols(payload: bytes, count: int, alphabet: int) -> np.ndarray:
    """Inverse of :func:`encode_symbols`; bits past the payload read as zero."""
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    nbits = bits.size
    bits = bits.tolist()
    pos = 0

    def next_bit():
        nonlocal pos
        b = bits[pos] if pos < nbits else 0
        pos += 1
        return b

    code = 0
    for _ in range(STATE_BITS):
        code = (code << 1) | next_bit()
    low, high = 0, _MASK
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        rng = high - low + 1
        s = ((code - low + 1) * alphabet - 1) // rng
        out[i] = s
        high = low + (s + 1) * rng // alphabet - 1
        low = low + s * rng // alphabet
        while not (low ^ high) & _HALF:
            code = ((code << 1) & _MASK) | next_bit()
            low = (low << 1) & _MASK
            high = ((high << 1) & _MASK) | 1
        while low & ~high & _QUARTER:
            code = (code & _HALF) | ((code << 1) & (_MASK >> 1)) | next_bit()
            low = (low << 1) ^ _HALF
            high = ((high ^ _HALF) << 1) | _HALF | 1
    return out


# ---------------------------------------------------------------------------
# archive container
# ---------------------------------------------------------------------------


def _pack_records(magic: bytes, n: int, m: int, records: Sequence[tuple[str, int, int, bytes]]) -> bytes:
    parts = [_HEADER.pack(magic, VERSION, n, m, len(records))]
    for name, rows, cols, payload in records:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(_DIMS.pack(rows, cols, len(payload)))
        parts.append(payload)
    return b"".join(parts)


def _check_masks(masks: Sequence[LayerMask], n: int, m: int) -> None:
    size = comb(m, n)
    for lm in masks:
        if (lm.n, lm.m) != (n, m):
            raise PatternError(f"{lm.tensor_name}: mask is {lm.n}:{lm.m}, archive is {n}:{m}")
        idx = lm.block_indices
        if idx.size and (idx.min() < 0 or idx.max() >= size):
            raise PatternError(f"{lm.tensor_name}: block index outside [0, {size})")


def encode_masks(masks: Sequence[LayerMask], n: int = 2, m: int = 4) -> bytes:
    enumerate_candidates(n, m)
    _check_masks(masks, n, m)
    size = comb(m, n)
    records = [
        (lm.tensor_name, lm.rows, lm.cols, encode_symbols(lm.block_indices.reshape(-1).tolist(), size))
        for lm in masks
    ]
    return _pack_records(MAGIC, n, m, records)


def encode_dense_masks(masks: Sequence[LayerMask], n: int = 2, m: int = 4) -> bytes:
    """Write the uncompressed bit-matrix interchange format."""
    _check_masks(masks, n, m)
    records = [
        (
            lm.tensor_name,
            lm.rows,
            lm.cols,
            np.packbits(lm.to_dense(np.uint8).reshape(-1), bitorder="little").tobytes(),
        )
        for lm in masks
    ]
    return _pack_records(DENSE_MAGIC, n, m, records)


def _parse(data: bytes, expect_magic: bytes | None):
    view = memoryview(data)
    if len(view) < _HEADER.size:
        raise FormatError("truncated header", len(view))
    magic, version, n, m, count = _HEADER.unpack_from(view, 0)
    if magic not in (MAGIC, DENSE_MAGIC) or (expect_magic and magic != expect_magic):
        raise FormatError(f"bad magic {bytes(magic)!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    try:
        enumerate_candidates(n, m)
    except PatternError as e:
        raise FormatError(str(e), 6) from None
    off = _HEADER.size
    records = []
    for k in range(count):
        if off + 2 > len(view):
            raise FormatError(f"truncated record header for tensor #{k}", off)
        (name_len,) = struct.unpack_from("<H", view, off)
        off += 2
        if off + name_len + _DIMS.size > len(view):
            raise FormatError(f"truncated record header for tensor #{k}", off)
        try:
            name = bytes(view[off : off + name_len]).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"tensor #{k} name is not utf-8", off) from None
        off += name_len
        rows, cols, plen = _DIMS.unpack_from(view, off)
        off += _DIMS.size
        if off + plen > len(view):
            raise FormatError(
                f"truncated payload for tensor {name!r}: need {plen} bytes, {len(view) - off} left", off
            )
        records.append((name, rows, cols, bytes(view[off : off + plen]), off))
        off += plen
    if off != len(view):
        raise FormatError(f"{len(view) - off} trailing bytes after last tensor", off)
    return magic, n, m, records


def decode_masks(data: bytes) -> list[LayerMask]:
    magic, n, m, records = _parse(data, MAGIC)
    size = comb(m, n)
    out = []
    for name, rows, cols, payload, off in records:
        if cols % m:
            raise FormatError(f"tensor {name!r}: cols={cols} not divisible by {m}", off)
        count = rows * cols // m
        idx = decode_symbols(payload, count, size)
        out.append(LayerMask(name, rows, cols, idx.reshape(rows, cols // m), n, m))
    return out


def decode_dense_masks(data: bytes) -> list[LayerMask]:
    magic, n, m, records = _parse(data, DENSE_MAGIC)
    out = []
    for name, rows, cols, payload, off in records:
        need = (rows * cols + 7) // 8
        if len(payload) != need:
            raise FormatError(f"tensor {name!r}: expected {need} payload bytes, got {len(payload)}", off)
        bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")[: rows * cols]
        out.append(LayerMask.from_dense(name, bits.reshape(rows, cols), n, m))
    return out


def read_mask_file(data: bytes) -> list[LayerMask]:
    """Decode either container flavour, dispatching on the magic bytes."""
    if len(data) == 0:
        return []
    if data[:4] == DENSE_MAGIC:
        return decode_dense_masks(data)
    return decode_masks(data)


def archive_pattern(data: bytes) -> tuple[int, int]:
    _, n, m, _ = _parse(data, None)
    return n, m


def payload_bits(data: bytes) -> tuple[int, int]:
    """Total payload bits and total parameter count of an archive."""
    _, _, _, records = _parse(data, None)
    bits = sum(8 * len(p) for _, _, _, p, _ in records)
    params = sum(r * c for _, r, c, _, _ in records)
    return bits, params


def entropy_bits_per_param(n: int = 2, m: int = 4) -> float:
    return log2(comb(m, n)) / m
