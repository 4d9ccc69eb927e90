"""One-shot N:M baselines (magnitude, activation-weighted) and external mask import."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coding import read_mask_file
from .masks import LayerMask, PatternError, enumerate_candidates


@dataclass
class CalibrationStats:
    """Per-layer L2 norm of every input feature, accumulated over calibration samples."""

    sq_sums: dict[str, np.ndarray] = field(default_factory=dict)
    sample_count: int = 0

    @property
    def norms(self) -> dict[str, np.ndarray]:
        return {k: np.sqrt(v) for k, v in self.sq_sums.items()}

    def update(self, name: str, activations: np.ndarray) -> None:
        x = np.asarray(activations, dtype=np.float64).reshape(-1, np.shape(activations)[-1])
        sq = (x * x).sum(axis=0)
        if name in self.sq_sums:
            self.sq_sums[name] = self.sq_sums[name] + sq
        else:
            self.sq_sums[name] = sq


def _topn_blocks(scores: np.ndarray, n: int, m: int, name: str) -> LayerMask:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise PatternError(f"{name}: expected a 2-d weight matrix")
    rows, cols = scores.shape
    if cols % m:
        raise PatternError(f"{name}: width {cols} is not divisible by m={m}")
    blocks = scores.reshape(rows, cols // m, m)
    # stable sort on -score keeps the lowest column first among equal scores
    order = np.argsort(-blocks, axis=-1, kind="stable")[..., :n]
    keep = np.zeros(blocks.shape, dtype=np.uint8)
    np.put_along_axis(keep, order, 1, axis=-1)
    return LayerMask.from_dense(name, keep.reshape(rows, cols), n, m)


def magnitude_prune(weights, n: int = 2, m: int = 4, name: str = "weight") -> LayerMask:
    """Keep the ``n`` largest ``|w|`` of every block (lowest index wins ties)."""
    enumerate_candidates(n, m)
    return _topn_blocks(np.abs(np.asarray(weights, dtype=np.float64)), n, m, name)


def wanda_prune(weights, stats: CalibrationStats, n: int = 2, m: int = 4, name: str = "weight") -> LayerMask:
    """Keep the ``n`` largest ``|w_ij| * ||x_j||`` of every block."""
    enumerate_candidates(n, m)
    if name not in stats.sq_sums:
        raise KeyError(f"no calibration statistics for {name!r}")
    w = np.abs(np.asarray(weights, dtype=np.float64))
    norm = stats.norms[name]
    if norm.shape != (w.shape[-1],):
        raise PatternError(f"{name}: statistics cover {norm.shape[0]} features, weight has {w.shape[-1]}")
    return _topn_blocks(w * norm[None, :], n, m, name)


def calibrate(model, data_batches, max_samples: int = 256) -> CalibrationStats:
    """Accumulate input-feature norms of every prunable projection over up to ``max_samples`` sequences."""
    if max_samples <= 0:
        raise ValueError("max_samples must be positive")
    stats = CalibrationStats()
    seen = 0
    for inputs, _ in data_batches:
        inputs = np.asarray(inputs)
        take = min(inputs.shape[0], max_samples - seen)
        if take <= 0:
            break
        capture: dict = {}
        model.forward(inputs[:take], capture=capture)
        for name in model.prunable:
            for act in capture.get(name, []):
                stats.update(name, act)
        seen += take
    if seen == 0:
        raise ValueError("calibration data is empty")
    stats.sample_count = seen
    return stats


def prune_model(model, method: str = "magnitude", n: int = 2, m: int = 4, stats: CalibrationStats | None = None,
                skip: set[str] | None = None) -> list[LayerMask]:
    """One-shot masks for every prunable tensor of ``model`` (``skip`` lists tensors kept dense)."""
    out = []
    for name in model.prunable:
        if skip and name in skip:
            continue
        w = model.params[name]
        if method == "magnitude":
            out.append(magnitude_prune(w, n, m, name))
        elif method == "wanda":
            if stats is None:
                raise ValueError("wanda pruning needs calibration statistics")
            out.append(wanda_prune(w, stats, n, m, name))
        else:
            raise ValueError(f"unknown one-shot method {method!r}")
    return out


def import_external_masks(source, shapes: dict[str, tuple[int, int]] | None = None,
                          pattern: tuple[int, int] | None = None) -> list[LayerMask]:
    """Load masks from a ``NMMK`` archive or ``NMMB`` dense bit file (path or bytes).

    With ``shapes``, every mask must name a known tensor of matching shape.
    Dense files with a block that does not keep exactly ``n`` are rejected
    with the block coordinates.
    """
    data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    masks = read_mask_file(bytes(data))
    for lm in masks:
        if pattern is not None and (lm.n, lm.m) != tuple(pattern):
            raise PatternError(f"{lm.tensor_name}: file pattern {lm.n}:{lm.m} != expected {pattern[0]}:{pattern[1]}")
        if shapes is not None:
            if lm.tensor_name not in shapes:
                raise PatternError(f"{lm.tensor_name}: not a prunable tensor of this model")
            if tuple(shapes[lm.tensor_name]) != (lm.rows, lm.cols):
                raise PatternError(
                    f"{lm.tensor_name}: mask shape {(lm.rows, lm.cols)} != weight shape {tuple(shapes[lm.tensor_name])}"
                )
    return masks
