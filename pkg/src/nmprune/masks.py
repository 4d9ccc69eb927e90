"""N:M candidate sets, hard layer masks and prior-to-logit conversion."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb

import numpy as np

MAX_BLOCK = 16

# Candidate order for 2:4 is fixed; archive block indices depend on it.
_ORDER_2_4 = (
    (1, 1, 0, 0),
    (1, 0, 1, 0),
    (1, 0, 0, 1),
    (0, 1, 0, 1),
    (0, 1, 1, 0),
    (0, 0, 1, 1),
)


class PatternError(ValueError):
    """Invalid N:M pattern or a mask that violates it."""


@dataclass(frozen=True, eq=False)
class MaskCandidateSet:
    n: int
    m: int
    masks: np.ndarray  # (|S|, m) uint8

    @property
    def size(self) -> int:
        return self.masks.shape[0]

    def __len__(self) -> int:
        return self.size

    def index_of(self, bits) -> int:
        bits = np.asarray(bits).astype(np.uint8)
        hits = np.flatnonzero((self.masks == bits).all(axis=1))
        if hits.size != 1:
            raise PatternError(f"{bits.tolist()} is not a {self.n}:{self.m} mask")
        return int(hits[0])

    def lookup_table(self) -> dict[int, int]:
        """Map the integer value of a block's bit pattern (bit j = column j) to its index."""
        weights = 1 << np.arange(self.m)
        return {int(v): i for i, v in enumerate(self.masks.astype(np.int64) @ weights)}


@lru_cache(maxsize=None)
def enumerate_candidates(n: int, m: int) -> MaskCandidateSet:
    """All C(m, n) binary masks keeping ``n`` of ``m`` entries.

    2:4 follows the fixed canonical listing; every other pattern is listed in
    descending lexicographic order.
    """
    if not (isinstance(n, (int, np.integer)) and isinstance(m, (int, np.integer))):
        raise PatternError("n and m must be integers")
    if not 0 < n < m <= MAX_BLOCK:
        raise PatternError(f"invalid pattern {n}:{m}; need 0 < n < m <= {MAX_BLOCK}")
    if (n, m) == (2, 4):
        rows = _ORDER_2_4
    else:
        rows = sorted(
            (r for r in itertools.product((1, 0), repeat=m) if sum(r) == n),
            reverse=True,
        )
    masks = np.array(rows, dtype=np.uint8)
    assert masks.shape[0] == comb(m, n)
    masks.setflags(write=False)
    return MaskCandidateSet(int(n), int(m), masks)


def parse_pattern(text: str) -> tuple[int, int]:
    try:
        n, m = (int(p) for p in text.split(":"))
    except ValueError:
        raise PatternError(f"pattern must look like 'n:m', got {text!r}") from None
    enumerate_candidates(n, m)
    return n, m


def _check_block(bits, n: int) -> np.ndarray:
    bits = np.asarray(bits)
    if bits.ndim != 1 or not np.isin(bits, (0, 1)).all() or int(bits.sum()) != n:
        raise PatternError(f"malformed block mask {np.asarray(bits).tolist()}")
    return bits.astype(np.int64)


def mask_similarity(prior, candidates: MaskCandidateSet) -> np.ndarray:
    """Centred inner product of ``prior`` with every candidate: ``prior . S_i - n/2``."""
    prior = _check_block(prior, candidates.n)
    if prior.shape[0] != candidates.m:
        raise PatternError(f"prior has length {prior.shape[0]}, expected {candidates.m}")
    return candidates.masks.astype(np.int64) @ prior - candidates.n / 2


def similarity_table(candidates: MaskCandidateSet) -> np.ndarray:
    """``table[k]`` is the similarity vector for a prior equal to candidate ``k``."""
    s = candidates.masks.astype(np.float64)
    return s @ s.T - candidates.n / 2


def apply_prior(logits, prior, alpha: float, candidates: MaskCandidateSet | None = None) -> np.ndarray:
    """Shift logits toward candidates that overlap the prior mask.

    ``pi' = pi + std(pi) * sim(prior, S_i) * alpha`` with the standard
    deviation taken over the candidate axis of each block.

    ``logits`` may be a single block (``(|S|,)``) with ``prior`` a bit vector,
    or a batch ``(blocks, |S|)`` with ``prior`` an int array of candidate
    indices, one per block.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    logits = np.asarray(logits, dtype=np.float64)
    if candidates is None:
        candidates = _candidates_for_width(logits.shape[-1])
    if logits.shape[-1] != candidates.size:
        raise PatternError(f"logit width {logits.shape[-1]} != candidate count {candidates.size}")
    if alpha == 0:
        return logits.copy()
    if logits.ndim == 1:
        sim = mask_similarity(prior, candidates)
    else:
        idx = np.asarray(prior, dtype=np.int64).reshape(-1)
        if idx.shape[0] != logits.shape[0]:
            raise PatternError("need one prior index per block")
        if idx.size and (idx.min() < 0 or idx.max() >= candidates.size):
            raise PatternError("prior index out of range")
        sim = similarity_table(candidates)[idx]
    sigma = logits.std(axis=-1, keepdims=True)
    return logits + sigma * sim * alpha


def _candidates_for_width(width: int) -> MaskCandidateSet:
    if width == 6:
        return enumerate_candidates(2, 4)
    raise PatternError("pass the candidate set explicitly for patterns other than 2:4")


def select_final_mask(logits, candidates: MaskCandidateSet | None = None) -> np.ndarray:
    """Hard mask of the highest logit (lowest index on ties)."""
    logits = np.asarray(logits)
    if candidates is None:
        candidates = _candidates_for_width(logits.shape[-1])
    return candidates.masks[int(np.argmax(logits))].copy()


def select_indices(logits) -> np.ndarray:
    """Row-wise argmax for a ``(blocks, |S|)`` logit matrix."""
    return np.argmax(np.asarray(logits), axis=-1)


@dataclass(eq=False)
class LayerMask:
    """Hard N:M mask of one weight matrix, stored as one candidate index per block.

    Blocks run along the column (input) axis: block ``(r, b)`` covers columns
    ``b*m .. b*m+m-1`` of row ``r``.
    """

    tensor_name: str
    rows: int
    cols: int
    block_indices: np.ndarray = field(repr=False)
    n: int = 2
    m: int = 4

    def __post_init__(self):
        if self.cols % self.m:
            raise PatternError(f"{self.tensor_name}: cols={self.cols} not divisible by m={self.m}")
        idx = np.asarray(self.block_indices, dtype=np.int64).reshape(self.rows, self.cols // self.m)
        size = comb(self.m, self.n)
        if idx.size and (idx.min() < 0 or idx.max() >= size):
            bad = np.argwhere((idx < 0) | (idx >= size))[0]
            raise PatternError(f"{self.tensor_name}: block {tuple(bad)} has index outside [0, {size})")
        self.block_indices = idx

    @property
    def candidates(self) -> MaskCandidateSet:
        return enumerate_candidates(self.n, self.m)

    @property
    def num_blocks(self) -> int:
        return self.block_indices.size

    @property
    def param_count(self) -> int:
        return self.rows * self.cols

    def to_dense(self, dtype=np.float64) -> np.ndarray:
        return self.candidates.masks[self.block_indices].reshape(self.rows, self.cols).astype(dtype)

    @classmethod
    def from_dense(cls, name: str, dense, n: int = 2, m: int = 4) -> "LayerMask":
        """Recover block indices from a binary matrix; every block must keep exactly ``n``."""
        dense = np.asarray(dense)
        if dense.ndim != 2:
            raise PatternError(f"{name}: dense mask must be 2-d")
        rows, cols = dense.shape
        if cols % m:
            raise PatternError(f"{name}: cols={cols} not divisible by m={m}")
        if not np.isin(dense, (0, 1)).all():
            raise PatternError(f"{name}: mask is not binary")
        blocks = dense.reshape(rows, cols // m, m).astype(np.int64)
        sums = blocks.sum(axis=-1)
        if (sums != n).any():
            r, b = np.argwhere(sums != n)[0]
            raise PatternError(
                f"{name}: block at row {r}, block {b} (cols {b * m}..{b * m + m - 1}) keeps "
                f"{sums[r, b]} of {m}, expected {n}"
            )
        table = enumerate_candidates(n, m).lookup_table()
        codes = blocks @ (1 << np.arange(m))
        lut = np.zeros(1 << m, dtype=np.int64)
        for code, i in table.items():
            lut[code] = i
        return cls(name, rows, cols, lut[codes], n, m)

    def __eq__(self, other):
        if not isinstance(other, LayerMask):
            return NotImplemented
        return (
            self.tensor_name == other.tensor_name
            and (self.rows, self.cols, self.n, self.m) == (other.rows, other.cols, other.n, other.m)
            and np.array_equal(self.block_indices, other.block_indices)
        )
