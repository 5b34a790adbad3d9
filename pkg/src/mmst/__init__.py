"""Multi-modal Swin transformer (MMST) for three-class building damage classification.

A numpy reverse-mode autodiff core, the shifted-window image branch, the
structured-feature branch, decision-level fusion, training and evaluation
protocol, metrics, a synthetic multi-modal data generator and a CLI.
"""
from .fusion import MMST, FusionConfig, fuse, predict
from .structured import StructuredConfig, StructuredExtractor, StructuredRecord
from .swin import SwinConfig, SwinImageExtractor
from .tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "MMST", "FusionConfig", "fuse", "predict", "StructuredConfig", "StructuredExtractor",
    "StructuredRecord", "SwinConfig", "SwinImageExtractor", "Tensor", "backward",
]
