"""Decision-level fusion and the full multi-modal classifier."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .structured import StructuredBatch, StructuredConfig, StructuredExtractor
from .swin import SwinConfig, SwinImageExtractor
from .tensor import DimensionError, Tensor

NUM_CLASSES = 3
CLASS_NAMES = ("no damage", "minor-to-moderate", "major-to-destroyed")
MODES = ("fused", "image", "structured")


@dataclass
class FusionConfig:
    ratio: float = 0.80
    feature_dim: int = 64
    num_classes: int = NUM_CLASSES
    mode: str = "fused"

    def validate(self) -> None:
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"fusion ratio must lie in [0, 1], got {self.ratio}")
        if self.num_classes != NUM_CLASSES:
            raise ValueError("the damage taxonomy has exactly three classes")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def fuse(x: Tensor, y: Tensor, ratio: float) -> Tensor:
    """x * R + y * (1 - R), evaluated as y + R * (x - y) so that fuse(x, x, R) == x exactly."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"fusion ratio must lie in [0, 1], got {ratio}")
    if x.shape != y.shape:
        raise DimensionError(f"cannot fuse features of shapes {x.shape} and {y.shape}")
    if ratio == 1.0:
        return x
    if ratio == 0.0:
        return y
    return T.add(y, T.scale(T.sub(x, y), ratio))


def predict(logits) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    return np.argmax(data, axis=-1)


class MMST(Module):
    """Image branch + structured branch, fused before a linear classifier."""

    def __init__(self, swin: SwinConfig, structured: StructuredConfig, fusion: FusionConfig,
                 seed: int = 0):
        fusion.validate()
        if swin.out_dim != fusion.feature_dim or structured.out_dim != fusion.feature_dim:
            raise DimensionError(
                f"feature dims differ: image {swin.out_dim}, structured {structured.out_dim},"
                f" fusion {fusion.feature_dim}")
        self.swin_cfg, self.structured_cfg, self.fusion_cfg = swin, structured, fusion
        self.seed = seed
        self.image = SwinImageExtractor(swin, np.random.default_rng([seed, 1]))
        self.structured = StructuredExtractor(structured, np.random.default_rng([seed, 2]))
        self.classifier = Linear(fusion.feature_dim, NUM_CLASSES, np.random.default_rng([seed, 3]))

    def features(self, images: Optional[np.ndarray], batch: Optional[StructuredBatch]) -> Tensor:
        mode, ratio = self.fusion_cfg.mode, self.fusion_cfg.ratio
        if mode == "image" or (mode == "fused" and ratio == 1.0):
            return self.image(images)
        if mode == "structured" or (mode == "fused" and ratio == 0.0):
            return self.structured(batch)
        return fuse(self.image(images), self.structured(batch), ratio)

    def __call__(self, images: Optional[np.ndarray], batch: Optional[StructuredBatch]) -> Tensor:
        """[B, 3] logits."""
        return self.classifier(self.features(images, batch))
