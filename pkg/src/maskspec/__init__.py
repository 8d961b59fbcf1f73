"""Numpy spectrogram transformers trained by reconstructing masked patches."""

from .model import DecoderConfig, EncoderConfig, MaskSpecModel, ModelConfig, param_count
from .patching import MaskPlan, patchify, random_mask, unpatchify

__version__ = "0.1.0"

__all__ = [
    "DecoderConfig",
    "EncoderConfig",
    "MaskPlan",
    "MaskSpecModel",
    "ModelConfig",
    "param_count",
    "patchify",
    "random_mask",
    "unpatchify",
]
