"""Learnable N:M sparsity masks: Gumbel-softmax mask learning, one-shot baselines,
compressed mask archives and a 2:4 structured-sparse kernel."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward
from .coding import FormatError, decode_masks, encode_masks
from .masks import LayerMask, MaskCandidateSet, PatternError, enumerate_candidates
from .models import ToyModelSpec, build_model
from .pruners import magnitude_prune, wanda_prune
from .trainer import ConfigError, TrainConfig, train_masks, transfer_masks

__all__ = [
    "ConfigError", "FormatError", "LayerMask", "MaskCandidateSet", "PatternError", "Tensor", "ToyModelSpec",
    "TrainConfig", "backward", "build_model", "decode_masks", "encode_masks", "enumerate_candidates",
    "magnitude_prune", "train_masks", "transfer_masks", "wanda_prune",
]
