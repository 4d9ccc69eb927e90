"""Gumbel-softmax sampling of differentiable N:M masks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masks import LayerMask, MaskCandidateSet, select_indices

EPS_MIN = 1e-10


class NoiseSource:
    """Seeded stream of uniform draws mapped to Gumbel(0, 1) noise."""

    def __init__(self, seed: int = 0, eps_min: float = EPS_MIN):
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.eps_min = eps_min
        self._lo = np.nextafter(eps_min, 1.0)
        self._hi = np.nextafter(1.0 - eps_min, 0.0)

    def uniform(self, shape) -> np.ndarray:
        return np.clip(self.rng.random(shape), self._lo, self._hi)

    def gumbel(self, shape) -> np.ndarray:
        return gumbel_from_uniform(self.uniform(shape))

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def gumbel_from_uniform(eps) -> np.ndarray:
    return -np.log(-np.log(np.asarray(eps, dtype=np.float64)))


def sample_gumbel(noise: NoiseSource, count) -> np.ndarray:
    if isinstance(count, int) and count <= 0:
        raise ValueError("count must be positive")
    return noise.gumbel(count)


def soft_index(logits, noise, tau: float, kappa: float) -> Tensor:
    """Relaxed one-hot sample: ``softmax((kappa * logits + noise) / tau)`` over the last axis.

    Differentiable w.r.t. ``logits``; ``noise`` is a constant.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    logits = ad.as_tensor(logits)
    noise = np.asarray(noise, dtype=logits.dtype)
    if noise.shape != logits.shape:
        raise ad.ShapeError(f"noise shape {noise.shape} != logits shape {logits.shape}")
    z = ad.add(ad.scale(logits, kappa / tau), noise / tau)
    return ad.softmax(z, axis=-1)


def differentiable_mask(soft_idx, candidates: MaskCandidateSet) -> Tensor:
    """Probability-weighted average of candidate masks, ``soft_idx @ S``."""
    soft_idx = ad.as_tensor(soft_idx)
    if soft_idx.shape[-1] != candidates.size:
        raise ad.ShapeError(f"soft index length {soft_idx.shape[-1]} != |S| = {candidates.size}")
    s = candidates.masks.astype(soft_idx.dtype)
    if soft_idx.ndim == 1:
        return ad.reshape(ad.matmul(ad.reshape(soft_idx, (1, -1)), s), (candidates.m,))
    return ad.matmul(soft_idx, s)


def probability_from_logits(logits, kappa: float) -> np.ndarray:
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    z = np.asarray(logits, dtype=np.float64) * kappa
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class GumbelSchedule:
    tau_start: float = 4.0
    tau_end: float = 0.05
    kappa_start: float = 1e2
    kappa_end: float = 5e2
    total_steps: int = 2000
    tau_decay: str = "geometric"

    def __post_init__(self):
        if min(self.tau_start, self.tau_end, self.kappa_start, self.kappa_end) <= 0:
            raise ValueError("schedule endpoints must be positive")
        if self.tau_start < self.tau_end:
            raise ValueError("tau_start must be >= tau_end")
        if self.kappa_start > self.kappa_end:
            raise ValueError("kappa_start must be <= kappa_end")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.tau_decay not in ("geometric", "linear"):
            raise ValueError(f"unknown tau_decay {self.tau_decay!r}")

    def at(self, step: int) -> tuple[float, float]:
        return schedule_at(self, step)


def schedule_at(s: GumbelSchedule, step: int) -> tuple[float, float]:
    """(tau, kappa) at ``step``: kappa linear, tau geometric (or linear) between the endpoints."""
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if step == 0:
        return s.tau_start, s.kappa_start
    if step == s.total_steps:
        return s.tau_end, s.kappa_end
    frac = step / s.total_steps
    kappa = s.kappa_start + (s.kappa_end - s.kappa_start) * frac
    if s.tau_decay == "geometric":
        tau = math.exp(math.log(s.tau_start) + (math.log(s.tau_end) - math.log(s.tau_start)) * frac)
    else:
        tau = s.tau_start + (s.tau_end - s.tau_start) * frac
    return tau, kappa


class MaskDistribution:
    """Learnable per-block categorical distribution over the candidate masks of one weight."""

    def __init__(self, tensor_name: str, rows: int, cols: int, logits, candidates: MaskCandidateSet):
        if cols % candidates.m:
            raise ValueError(f"{tensor_name}: cols={cols} not divisible by m={candidates.m}")
        logits = np.asarray(logits, dtype=np.float64)
        blocks = rows * cols // candidates.m
        if logits.shape != (blocks, candidates.size):
            raise ValueError(f"{tensor_name}: logits shape {logits.shape}, expected {(blocks, candidates.size)}")
        if not np.isfinite(logits).all():
            raise ValueError(f"{tensor_name}: non-finite logits")
        self.tensor_name = tensor_name
        self.rows = rows
        self.cols = cols
        self.candidates = candidates
        self.logits = Tensor(logits, requires_grad=True)

    @property
    def num_blocks(self) -> int:
        return self.logits.shape[0]

    def soft_mask(self, noise: np.ndarray, tau: float, kappa: float, dtype=np.float64) -> Tensor:
        """Sampled relaxed mask, reshaped to the weight's ``(rows, cols)``."""
        y = soft_index(ad.cast(self.logits, dtype), noise, tau, kappa)
        return ad.reshape(differentiable_mask(y, self.candidates), (self.rows, self.cols))

    def sampled_indices(self, noise: np.ndarray, kappa: float) -> np.ndarray:
        """Hard Gumbel-max sample for the same noise (temperature does not change the argmax)."""
        return np.argmax(kappa * self.logits.data + noise, axis=-1)

    def probabilities(self, kappa: float) -> np.ndarray:
        return probability_from_logits(self.logits.data, kappa)

    def hard_mask(self) -> LayerMask:
        idx = select_indices(self.logits.data).reshape(self.rows, self.cols // self.candidates.m)
        return LayerMask(self.tensor_name, self.rows, self.cols, idx, self.candidates.n, self.candidates.m)

