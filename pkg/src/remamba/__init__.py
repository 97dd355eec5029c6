"""Selective compression and selective adaptation on a small selective SSM."""

from .adaptation import AdaptationMode, two_stage_forward
from .compression import CompressionSpec, ScorerParams, compress, compute_window
from .estimator import VARIANTS, ReMambaLM
from .ssm import MambaLM, ModelConfig, ScanState, decode, forward_sequence
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "AdaptationMode", "CompressionSpec", "MambaLM", "ModelConfig", "ReMambaLM", "ScanState", "ScorerParams",
    "TrainConfig", "VARIANTS", "compress", "compute_window", "decode", "forward_sequence", "load_checkpoint",
    "save_checkpoint", "train", "two_stage_forward",
]
