"""2:4 compressed weights, a structured-sparse matmul kernel and a benchmark harness.

Layout of :class:`Sparse24Matrix`:

* ``values``: ``(rows, cols // 2)`` kept weights, two per 4-wide block, in column order.
* ``meta``: one nibble per block, ``idx0 | idx1 << 2`` with ``idx0 < idx1`` the kept
  positions inside the block. Blocks are numbered row-major; block ``2k`` goes in
  the low nibble of byte ``k``.
"""

from __future__ import annotations

import os
import struct
import time
from dataclasses import asdict, dataclass

import numba
import numpy as np

from .coding import FormatError
from .masks import LayerMask, PatternError, enumerate_candidates

# the system TBB is too old for numba; workqueue is always available
numba.config.THREADING_LAYER = "workqueue"

SPARSE_MAGIC = b"NMS2"
VERSION = 1
_HDR = struct.Struct("<4sHIIB")
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CorruptMetadata(ValueError):
    pass


def _set_threads() -> None:
    want = os.environ.get("NMS_THREADS")
    if want:
        numba.set_num_threads(max(1, min(int(want), numba.config.NUMBA_NUM_THREADS)))


@dataclass(eq=False)
class Sparse24Matrix:
    rows: int
    cols: int
    values: np.ndarray
    meta: np.ndarray

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def num_blocks(self) -> int:
        return self.rows * self.cols // 4

    def value_bytes(self) -> int:
        return self.values.nbytes

    def meta_bytes(self) -> int:
        return self.meta.nbytes

    def nbytes(self) -> int:
        return self.value_bytes() + self.meta_bytes()

    def to_bytes(self) -> bytes:
        code = _DTYPE_CODES[self.dtype]
        head = _HDR.pack(SPARSE_MAGIC, VERSION, self.rows, self.cols, code)
        return head + self.values.astype(self.dtype.newbyteorder("<")).tobytes() + self.meta.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Sparse24Matrix":
        if len(data) < _HDR.size:
            raise FormatError("truncated header", len(data))
        magic, version, rows, cols, code = _HDR.unpack_from(data, 0)
        if magic != SPARSE_MAGIC:
            raise FormatError(f"bad magic {magic!r}", 0)
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", 4)
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code}", 14)
        if cols % 4:
            raise FormatError(f"cols={cols} not divisible by 4", 10)
        dt = _CODE_DTYPES[code]
        off = _HDR.size
        nval = rows * cols // 2
        vbytes = nval * dt.itemsize
        mbytes = (rows * cols // 4 + 1) // 2
        if len(data) != off + vbytes + mbytes:
            raise FormatError(f"expected {off + vbytes + mbytes} bytes, got {len(data)}", min(len(data), off + vbytes))
        values = np.frombuffer(data, dtype=dt.newbyteorder("<"), count=nval, offset=off).astype(dt).reshape(rows, cols // 2)
        meta = np.frombuffer(data, dtype=np.uint8, count=mbytes, offset=off + vbytes).copy()
        s = cls(rows, cols, values, meta)
        _block_positions(s)
        return s


def _pair_table() -> np.ndarray:
    s = enumerate_candidates(2, 4).masks
    return np.array([np.flatnonzero(r) for r in s], dtype=np.uint8)


def compress(weights, mask: LayerMask) -> Sparse24Matrix:
    """Keep the two masked-in values of every block and pack their positions."""
    w = np.asarray(weights)
    if w.dtype not in _DTYPE_CODES:
        w = w.astype(np.float64)
    if (mask.n, mask.m) != (2, 4):
        raise PatternError(f"{mask.tensor_name}: 2:4 mask required, got {mask.n}:{mask.m}")
    if w.shape != (mask.rows, mask.cols):
        raise PatternError(f"{mask.tensor_name}: mask shape {(mask.rows, mask.cols)} != weight shape {w.shape}")
    rows, cols = w.shape
    pairs = _pair_table()[mask.block_indices.reshape(-1)]  # (blocks, 2)
    blocks = w.reshape(-1, 4)
    values = np.take_along_axis(blocks, pairs.astype(np.int64), axis=1).reshape(rows, cols // 2)
    nib = (pairs[:, 0] | (pairs[:, 1] << 2)).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    meta = (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8)
    return Sparse24Matrix(rows, cols, np.ascontiguousarray(values), meta)


def _nibbles(s: Sparse24Matrix) -> np.ndarray:
    nib = np.empty(s.meta.size * 2, dtype=np.uint8)
    nib[0::2] = s.meta & 0xF
    nib[1::2] = s.meta >> 4
    return nib[: s.num_blocks]


def _block_positions(s: Sparse24Matrix) -> tuple[np.ndarray, np.ndarray]:
    nib = _nibbles(s)
    i0 = nib & 3
    i1 = nib >> 2
    bad = np.flatnonzero(i0 >= i1)
    if bad.size:
        b = int(bad[0])
        raise CorruptMetadata(
            f"block {b} (row {b // (s.cols // 4)}, block {b % (s.cols // 4)}) has indices {int(i0[b])},{int(i1[b])}; "
            "expected two distinct increasing positions"
        )
    return i0, i1


def decompress(s: Sparse24Matrix) -> np.ndarray:
    i0, i1 = _block_positions(s)
    out = np.zeros((s.num_blocks, 4), dtype=s.dtype)
    vals = s.values.reshape(-1, 2)
    ar = np.arange(s.num_blocks)
    out[ar, i0] = vals[:, 0]
    out[ar, i1] = vals[:, 1]
    return out.reshape(s.rows, s.cols)


def to_layer_mask(s: Sparse24Matrix, name: str = "weight") -> LayerMask:
    i0, i1 = _block_positions(s)
    dense = np.zeros((s.num_blocks, 4), dtype=np.uint8)
    ar = np.arange(s.num_blocks)
    dense[ar, i0] = 1
    dense[ar, i1] = 1
    return LayerMask.from_dense(name, dense.reshape(s.rows, s.cols))


# ---------------------------------------------------------------------------
# kernels: row-parallel, f64 accumulation, same block-of-4 loop structure
# ---------------------------------------------------------------------------


@numba.njit(parallel=True, cache=True, fastmath=False)
def _spmm_kernel(values, meta, x, out):
    rows, half = values.shape
    nb = half // 2
    n = x.shape[1]
    for i in numba.prange(rows):
        acc = np.zeros(n, dtype=np.float64)
        for blk in range(nb):
            g = i * nb + blk
            nib = (meta[g >> 1] >> (4 * (g & 1))) & 0xF
            c0 = blk * 4 + (nib & 3)
            c1 = blk * 4 + (nib >> 2)
            a0 = np.float64(values[i, 2 * blk])
            a1 = np.float64(values[i, 2 * blk + 1])
            for j in range(n):
                acc[j] += a0 * x[c0, j] + a1 * x[c1, j]
        for j in range(n):
            out[i, j] = acc[j]


@numba.njit(parallel=True, cache=True, fastmath=False)
def _dense_kernel(w, x, out):
    rows, cols = w.shape
    nb = cols // 4
    n = x.shape[1]
    for i in numba.prange(rows):
        acc = np.zeros(n, dtype=np.float64)
        for blk in range(nb):
            c = blk * 4
            a0 = np.float64(w[i, c])
            a1 = np.float64(w[i, c + 1])
            a2 = np.float64(w[i, c + 2])
            a3 = np.float64(w[i, c + 3])
            for j in range(n):
                acc[j] += a0 * x[c, j] + a1 * x[c + 1, j] + a2 * x[c + 2, j] + a3 * x[c + 3, j]
        for j in range(n):
            out[i, j] = acc[j]


def spmm(s: Sparse24Matrix, x) -> np.ndarray:
    """``decompress(s) @ x`` touching only the kept weights."""
    x = np.ascontiguousarray(x, dtype=s.dtype)
    if x.ndim != 2 or x.shape[0] != s.cols:
        raise PatternError(f"spmm: x has shape {x.shape}, expected ({s.cols}, n)")
    _block_positions(s)
    _set_threads()
    out = np.empty((s.rows, x.shape[1]), dtype=s.dtype)
    if s.rows and x.shape[1]:
        _spmm_kernel(s.values, s.meta, x, out)
    return out


def dense_matmul(w, x) -> np.ndarray:
    """Dense baseline with the same loop discipline as :func:`spmm`."""
    w = np.ascontiguousarray(w)
    x = np.ascontiguousarray(x, dtype=w.dtype)
    if w.shape[1] % 4 or x.shape[0] != w.shape[1]:
        raise PatternError(f"dense_matmul: shapes {w.shape} and {x.shape}")
    _set_threads()
    out = np.empty((w.shape[0], x.shape[1]), dtype=w.dtype)
    if w.shape[0] and x.shape[1]:
        _dense_kernel(w, x, out)
    return out


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchReport:
    rows: int
    cols: int
    batch: int
    dtype: str
    dense_time: float
    sparse_time: float
    speedup: float
    dense_bytes: int
    sparse_bytes: int
    footprint_ratio: float

    def to_text(self) -> str:
        return " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, line: str) -> "BenchReport":
        kv = dict(tok.split("=", 1) for tok in line.split())
        types = cls.__annotations__
        return cls(**{k: (int(v) if types[k] == "int" else float(v) if types[k] == "float" else v)
                      for k, v in kv.items()})


def footprint(rows: int, cols: int, dtype) -> tuple[int, int]:
    """(dense bytes, 2:4 bytes) from the format definition."""
    item = np.dtype(dtype).itemsize
    return rows * cols * item, rows * cols // 2 * item + (rows * cols // 4 + 1) // 2


def benchmark(sizes, repeats: int = 3, batch: int = 256, dtype=np.float32, seed: int = 0) -> list[BenchReport]:
    """Median-of-``repeats`` timings of the dense and 2:4 kernels on random square weights."""
    from .pruners import magnitude_prune

    rng = np.random.default_rng(seed)
    reports = []
    for size in sizes:
        if size % 4:
            raise PatternError(f"size {size} not divisible by 4")
        w = rng.standard_normal((size, size)).astype(dtype)
        x = rng.standard_normal((size, batch)).astype(dtype)
        s = compress(w, magnitude_prune(w))
        wm = decompress(s)
        dense_matmul(wm[:4, :4], x[:4, :1])
        spmm(compress(wm[:4, :4], magnitude_prune(wm[:4, :4])), x[:4, :1])
        td, ts = [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            dense_matmul(wm, x)
            td.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            spmm(s, x)
            ts.append(time.perf_counter() - t0)
        dbytes, sbytes = footprint(size, size, dtype)
        assert sbytes == s.nbytes()
        d, sp = float(np.median(td)), float(np.median(ts))
        reports.append(BenchReport(size, size, batch, np.dtype(dtype).name, d, sp, d / sp, dbytes, sbytes,
                                   sbytes / dbytes))
    return reports
