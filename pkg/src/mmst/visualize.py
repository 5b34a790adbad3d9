"""Attention heatmaps from the last image stage, rendered as red overlays."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .swin import SwinImageExtractor, effective_window
from .tensor import DimensionError


def token_heatmap(probs: np.ndarray, batch: int, h: int, w: int, m: int, s: int) -> np.ndarray:
    """Attention received per token, averaged over heads and queries.

    ``probs`` is [batch * windows, heads, M*M, M*M] from a (shifted) window
    attention over an h x w map; the result is [batch, h, w] in original
    (unshifted) token positions.
    """
    received = probs.mean(axis=(1, 2))                  # [B*nW, M*M], mean over heads, queries
    grid = received.reshape(batch, h // m, w // m, m, m).transpose(0, 1, 3, 2, 4)
    grid = grid.reshape(batch, h, w)
    return np.roll(grid, (s, s), axis=(1, 2)) if s else grid


def upsample_bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    """[B, h, w] -> [B, size, size] with pixel-center alignment and edge clamping."""
    b, h, w = grid.shape

    def coords(n_in: int):
        pos = np.clip((np.arange(size) + 0.5) * n_in / size - 0.5, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h)
    x0, x1, fx = coords(w)
    top = grid[:, y0][:, :, x0] * (1 - fx) + grid[:, y0][:, :, x1] * fx
    bottom = grid[:, y1][:, :, x0] * (1 - fx) + grid[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def normalize(heat: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling to [0, 1]; a constant map becomes all zeros."""
    lo = heat.min(axis=(1, 2), keepdims=True)
    span = heat.max(axis=(1, 2), keepdims=True) - lo
    return np.where(span > 0, (heat - lo) / np.where(span > 0, span, 1.0), 0.0)


def attention_heatmap(extractor: SwinImageExtractor, images: np.ndarray) -> np.ndarray:
    """[B, H, W, 3] images -> [B, H, W] heatmaps in [0, 1]."""
    images = np.asarray(images, dtype=np.float64)
    size = extractor.cfg.image_size
    if images.ndim != 4 or images.shape[1:] != (size, size, 3):
        raise DimensionError(f"expected images of shape [B, {size}, {size}, 3], got {images.shape}")
    extractor.keep_attention(True)
    try:
        with T.no_grad():
            fm = extractor.feature_map(images)
        probs = extractor.last_stage_attention()
    finally:
        extractor.keep_attention(False)
    block = extractor.stages[-1].pairs[-1].shifted.attn
    m, s = effective_window(fm.height, fm.width, block.window, block.shift)
    grid = token_heatmap(probs, images.shape[0], fm.height, fm.width, m, s)
    return normalize(upsample_bilinear(grid, size))


def overlay(image: np.ndarray, heat: np.ndarray, strength: float = 0.6) -> np.ndarray:
    """Blend red into ``image`` [H, W, 3] in proportion to ``heat`` [H, W]."""
    alpha = strength * heat[..., None]
    return image * (1.0 - alpha) + np.array([1.0, 0.0, 0.0]) * alpha


def quadrant_mass(heat: np.ndarray, quadrant: int) -> float:
    """Fraction of total heat in one quadrant (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right)."""
    h, w = heat.shape
    rows = slice(0, h // 2) if quadrant < 2 else slice(h // 2, h)
    cols = slice(0, w // 2) if quadrant % 2 == 0 else slice(w // 2, w)
    total = heat.sum()
    return float(heat[rows, cols].sum() / total) if total > 0 else 0.25
