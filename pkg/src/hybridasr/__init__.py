"""Decoder-only Conformer ASR with modality-aware mixture of experts, on a small numpy autodiff core."""

from .config import TrainConfig, load_config, parse_config, toy_config
from .conformer import DecoderOnlyConformer, count_parameters
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DecoderOnlyConformer",
    "TrainConfig",
    "count_parameters",
    "load_config",
    "parse_config",
    "toy_config",
]
