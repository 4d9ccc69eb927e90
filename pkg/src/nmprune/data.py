"""Byte-level corpora, deterministic batching and synthetic data sets."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Corpus:
    """Raw bytes split into contiguous train / validation parts (byte tokenizer, vocab 256)."""

    raw: bytes
    split: int

    @classmethod
    def from_bytes(cls, raw: bytes, val_fraction: float = 0.1) -> "Corpus":
        if not raw:
            raise ValueError("empty corpus")
        if not 0.0 < val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        return cls(bytes(raw), int(round(len(raw) * (1.0 - val_fraction))))

    @classmethod
    def from_file(cls, path, val_fraction: float = 0.1) -> "Corpus":
        return cls.from_bytes(Path(path).read_bytes(), val_fraction)

    @property
    def train(self) -> np.ndarray:
        return encode(self.raw[: self.split])

    @property
    def val(self) -> np.ndarray:
        return encode(self.raw[self.split :])


def encode(text) -> np.ndarray:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def decode(tokens) -> bytes:
    return np.asarray(tokens, dtype=np.uint8).tobytes()


class BatchIterator:
    """Random windows of ``context_length`` tokens with next-token targets.

    Each epoch visits every start offset exactly once in a seeded random
    order. ``batch(i)`` gives random access, which makes resumption trivial.
    """

    def __init__(self, tokens, batch_size: int, context_length: int, seed: int = 0):
        self.tokens = np.asarray(tokens)
        if batch_size <= 0 or context_length <= 0:
            raise ValueError("batch_size and context_length must be positive")
        self.num_offsets = self.tokens.size - context_length
        if self.num_offsets <= 0:
            raise ValueError(f"corpus of {self.tokens.size} tokens is too short for context {context_length}")
        self.batch_size = batch_size
        self.context_length = context_length
        self.seed = seed
        self._epoch = -1
        self._perm = None
        self._next = 0

    def _order(self, epoch: int) -> np.ndarray:
        if epoch != self._epoch:
            self._perm = np.random.default_rng([self.seed, epoch]).permutation(self.num_offsets)
            self._epoch = epoch
        return self._perm

    def offsets(self, i: int) -> np.ndarray:
        start = i * self.batch_size
        out = np.empty(self.batch_size, dtype=np.int64)
        for j in range(self.batch_size):
            g = start + j
            out[j] = self._order(g // self.num_offsets)[g % self.num_offsets]
        return out

    def batch(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        offs = self.offsets(i)
        idx = offs[:, None] + np.arange(self.context_length + 1)
        win = self.tokens[idx]
        return win[:, :-1], win[:, 1:]

    def __iter__(self):
        return self

    def __next__(self):
        b = self.batch(self._next)
        self._next += 1
        return b


def batch_iterator(tokens, batch_size: int, context_length: int, seed: int = 0) -> BatchIterator:
    return BatchIterator(tokens, batch_size, context_length, seed)


def sequential_batches(tokens, batch_size: int, context_length: int, max_batches: int | None = None) -> list:
    """Non-overlapping windows in corpus order, for evaluation."""
    tokens = np.asarray(tokens)
    n = (tokens.size - 1) // context_length
    if n <= 0:
        raise ValueError("corpus too short for one evaluation window")
    starts = np.arange(n) * context_length
    batches = []
    for b in range(0, n, batch_size):
        s = starts[b : b + batch_size]
        idx = s[:, None] + np.arange(context_length + 1)
        win = tokens[idx]
        batches.append((win[:, :-1], win[:, 1:]))
        if max_batches is not None and len(batches) >= max_batches:
            break
    return batches


class FixedBatches:
    """Cycles through a fixed list of batches; ``batch(i)`` is ``batches[i % len]``."""

    def __init__(self, batches):
        self.batches = list(batches)
        if not self.batches:
            raise ValueError("no batches")

    def batch(self, i: int):
        return self.batches[i % len(self.batches)]


def as_batch_source(data):
    if hasattr(data, "batch"):
        return data
    return FixedBatches(data)


# ---------------------------------------------------------------------------
# synthetic text
# ---------------------------------------------------------------------------

_DOMAINS = {
    "A": {
        "subjects": ["the farmer", "a miller", "the old shepherd", "my neighbour", "the baker",
                     "a young weaver", "the smith", "her brother", "the village priest", "a travelling tinker"],
        "verbs": ["carried", "sold", "mended", "planted", "gathered", "counted", "bought", "stored",
                  "watered", "harvested", "traded", "baked"],
        "objects": ["the barley", "three sacks of wheat", "fresh bread", "a wooden cart", "the apple trees",
                    "a basket of eggs", "the winter hay", "two brown goats", "the copper kettle",
                    "a bundle of wool", "the turnips", "sweet cider"],
        "tails": ["before the rain came", "at the market", "near the mill", "in the early morning",
                  "behind the stable", "for the harvest feast", "down by the river", "after the long winter"],
        "joiners": [", and then ", " while ", " because ", ". Later ", ". "],
    },
    "B": {
        "subjects": ["the compiler", "a worker thread", "the scheduler", "this function", "the parser",
                     "a background job", "the cache layer", "our test suite", "the kernel driver",
                     "the build script"],
        "verbs": ["allocates", "returns", "parses", "schedules", "flushes", "rejects", "serializes",
                  "compiles", "validates", "caches", "retries", "logs"],
        "objects": ["the input buffer", "a null pointer", "every request", "the config file",
                    "sixteen bytes", "the error code", "a hash table", "the JSON payload",
                    "all pending tasks", "the lock", "a stack frame", "the output stream"],
        "tails": ["on every call", "after a timeout", "in constant time", "before shutdown",
                  "without blocking", "when the queue is full", "at startup", "under heavy load"],
        "joiners": [", then ", " unless ", " so that ", ". Next ", ". "],
    },
}


def synthetic_text(num_bytes: int, seed: int = 0, domain: str = "A") -> bytes:
    """Deterministic English-like text from a small phrase grammar with Zipfian word choice."""
    if domain not in _DOMAINS:
        raise ValueError(f"unknown domain {domain!r}; choose from {sorted(_DOMAINS)}")
    g = _DOMAINS[domain]
    rng = np.random.default_rng([seed, ord(domain)])

    def pick(words):
        w = 1.0 / np.arange(1, len(words) + 1) ** 1.1
        return words[rng.choice(len(words), p=w / w.sum())]

    out: list[str] = []
    size = 0
    sentence = True
    while size < num_bytes:
        clause = f"{pick(g['subjects'])} {pick(g['verbs'])} {pick(g['objects'])}"
        if rng.random() < 0.6:
            clause += " " + pick(g["tails"])
        if sentence:
            clause = clause[0].upper() + clause[1:]
        joiner = pick(g["joiners"])
        sentence = joiner.endswith(". ")
        piece = clause + joiner
        if rng.random() < 0.08:
            piece = piece.rstrip() + "\n"
            sentence = True
        out.append(piece)
        size += len(piece)
    return "".join(out).encode("ascii")[:num_bytes]


def regression_data(in_dim: int, out_dim: int, num_samples: int, seed: int = 0, noise: float = 0.1):
    """Random linear regression problem ``y = x A^T + noise``; returns ``(x, y)``."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(num_samples, in_dim))
    a = rng.normal(size=(out_dim, in_dim))
    y = x @ a.T + noise * rng.normal(size=(num_samples, out_dim))
    return x, y
