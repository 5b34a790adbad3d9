"""Hierarchical shifted-window transformer for the image branch."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import INIT_SCHEMES, MLP, Init, LayerNorm, Linear, Module, MultiHeadSelfAttention
from .tensor import DimensionError, Tensor

MASK_VALUE = -1e9


@dataclass
class SwinConfig:
    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 32
    stage_depths: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    heads_per_stage: list[int] = field(default_factory=lambda: [2, 4, 8, 8])
    window_size: int = 4
    mlp_ratio: float = 4.0
    out_dim: int = 64
    weight_init: str = "trunc_normal"

    def validate(self) -> None:
        if self.weight_init not in INIT_SCHEMES:
            raise ValueError(f"unknown weight_init {self.weight_init!r}; choose from {INIT_SCHEMES}")
        if self.image_size % self.patch_size:
            raise DimensionError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        side = self.image_size // self.patch_size
        if side % self.window_size and side > self.window_size:
            raise DimensionError(
                f"token grid {side} not divisible by window_size {self.window_size}")
        if len(self.stage_depths) != len(self.heads_per_stage):
            raise ValueError("stage_depths and heads_per_stage differ in length")
        for depth in self.stage_depths:
            if depth % 2:
                raise ValueError(f"stage depth {depth} is odd; blocks come in W-MSA/SW-MSA pairs")
        for i, heads in enumerate(self.heads_per_stage):
            width = self.embed_dim * 2 ** i
            if width % heads:
                raise DimensionError(f"stage {i}: width {width} not divisible by {heads} heads")
        if side >> (len(self.stage_depths) - 1) < 1 or side % (1 << (len(self.stage_depths) - 1)):
            raise DimensionError(f"token grid {side} cannot be merged {len(self.stage_depths) - 1} times")

    @classmethod
    def full_scale(cls) -> "SwinConfig":
        """Swin-S layout: depths 2/2/18/2, heads 3/6/12/24, width 96, 224px input, window 7."""
        return cls(image_size=224, patch_size=4, embed_dim=96, stage_depths=[2, 2, 18, 2],
                   heads_per_stage=[3, 6, 12, 24], window_size=7, out_dim=64)

    @classmethod
    def desk(cls) -> "SwinConfig":
        """Small two-stage layout used by the experiment harness on a single CPU."""
        return cls(image_size=64, patch_size=8, embed_dim=16, stage_depths=[2, 2],
                   heads_per_stage=[2, 4], window_size=4, out_dim=32, weight_init="fan_in")


@dataclass
class FeatureMap:
    """Token grid; ``values`` has shape [batch, height, width, channels]."""

    values: Tensor

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def channels(self) -> int:
        return self.values.shape[3]


def partition_pixels(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, H, W, 3] pixels -> [B, H/P, W/P, P*P*3] flattened patches."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, h // patch, w // patch, patch * patch * c)


def window_partition(x: Tensor, m: int) -> Tensor:
    """[B, H, W, C] -> [B * (H/M) * (W/M), M*M, C], windows in row-major order."""
    b, h, w, c = x.shape
    if h % m or w % m:
        raise DimensionError(f"feature map {h}x{w} not divisible by window {m}")
    x = T.reshape(x, (b, h // m, m, w // m, m, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b * (h // m) * (w // m), m * m, c))


def window_reverse(windows: Tensor, m: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // m) * (w // m))
    x = T.reshape(windows, (b, h // m, w // m, m, m, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h, w, c))


def cyclic_shift(x: Tensor, s: int) -> Tensor:
    """Roll a [B, H, W, C] map by (-s, -s) with wraparound."""
    if s == 0:
        return x
    return T.roll(x, (-s, -s), (1, 2))


def attention_mask(h: int, w: int, m: int, s: int) -> np.ndarray:
    """Additive [num_windows, M*M, M*M] mask for attention on a map rolled by s.

    Tokens that were not contiguous before the roll get MASK_VALUE between them.
    """
    n_win = (h // m) * (w // m)
    if s == 0:
        return np.zeros((n_win, m * m, m * m))
    region = np.zeros((h, w))
    label = 0
    for hs in (slice(0, -m), slice(-m, -s), slice(-s, None)):
        for ws in (slice(0, -m), slice(-m, -s), slice(-s, None)):
            region[hs, ws] = label
            label += 1
    win = region.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(n_win, m * m)
    differs = win[:, None, :] != win[:, :, None]
    return np.where(differs, MASK_VALUE, 0.0)


def effective_window(h: int, w: int, m: int, shift: int) -> tuple[int, int]:
    """Clamp the window to small maps; no shift once one window covers the map."""
    if min(h, w) <= m:
        return min(h, w), 0
    return m, shift


class WindowAttention(Module):
    """(S)W-MSA: multi-head self-attention inside each (optionally shifted) window."""

    def __init__(self, dim: int, heads: int, window: int, shift: int, rng):
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.window = window
        self.shift = shift

    def __call__(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        m, s = effective_window(h, w, self.window, self.shift)
        shifted = cyclic_shift(x, s)
        windows = window_partition(shifted, m)
        mask = None
        if s:
            per_window = attention_mask(h, w, m, s)[:, None]
            mask = np.tile(per_window, (b, 1, 1, 1))
        out = self.attn(windows, mask)
        out = window_reverse(out, m, h, w)
        return cyclic_shift(out, -s) if s else out


class SwinBlock(Module):
    """One pre-LN residual attention sub-block followed by one pre-LN residual MLP."""

    def __init__(self, dim: int, heads: int, window: int, shift: int, mlp_ratio: float,
                 rng):
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, shift, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), rng)
        self.residual = True

    def __call__(self, x: Tensor) -> Tensor:
        a = self.attn(self.norm1(x))
        z = T.add(a, x) if self.residual else a
        f = self.mlp(self.norm2(z))
        return T.add(f, z) if self.residual else f


class SwinBlockPair(Module):
    """A W-MSA block followed by an SW-MSA block (shift = floor(M/2))."""

    def __init__(self, dim: int, heads: int, window: int, mlp_ratio: float,
                 rng):
        self.regular = SwinBlock(dim, heads, window, 0, mlp_ratio, rng)
        self.shifted = SwinBlock(dim, heads, window, window // 2, mlp_ratio, rng)

    def __call__(self, fm: FeatureMap) -> FeatureMap:
        return FeatureMap(self.shifted(self.regular(fm.values)))


class PatchMerging(Module):
    """Concatenate each 2x2 neighborhood (4C), layer-normalize and project to 2C."""

    def __init__(self, dim: int, rng):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def __call__(self, fm: FeatureMap) -> FeatureMap:
        x = fm.values
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"patch merging needs even extents, got {h}x{w}")
        x = T.reshape(x, (b, h // 2, 2, w // 2, 2, c))
        x = T.transpose(x, (0, 1, 3, 4, 2, 5))
        x = T.reshape(x, (b, h // 2, w // 2, 4 * c))
        return FeatureMap(self.reduction(self.norm(x)))


class SwinImageExtractor(Module):
    def __init__(self, cfg: SwinConfig, rng):
        cfg.validate()
        self.cfg = cfg
        rng = Init(rng, cfg.weight_init)
        p = cfg.patch_size
        self.patch_embed = Linear(p * p * 3, cfg.embed_dim, rng)
        self.patch_norm = LayerNorm(cfg.embed_dim)
        self.stages = []
        self.merges = []
        dim = cfg.embed_dim
        for i, (depth, heads) in enumerate(zip(cfg.stage_depths, cfg.heads_per_stage)):
            if i:
                self.merges.append(PatchMerging(dim, rng))
                dim *= 2
            self.stages.append(StageBlocks(
                [SwinBlockPair(dim, heads, cfg.window_size, cfg.mlp_ratio, rng)
                 for _ in range(depth // 2)]))
        self.norm = LayerNorm(dim)
        self.head = Linear(dim, cfg.out_dim, rng)

    def patch_partition(self, images: np.ndarray) -> FeatureMap:
        tokens = self.patch_embed(Tensor(partition_pixels(images, self.cfg.patch_size)))
        return FeatureMap(self.patch_norm(tokens))

    def feature_map(self, images: np.ndarray) -> FeatureMap:
        fm = self.patch_partition(images)
        for i, stage in enumerate(self.stages):
            if i:
                fm = self.merges[i - 1](fm)
            fm = stage(fm)
        return fm

    def __call__(self, images: np.ndarray) -> Tensor:
        """[B, H, W, 3] pixels in [0, 1] -> [B, out_dim] image features."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != (self.cfg.image_size, self.cfg.image_size, 3):
            raise DimensionError(
                f"expected images of shape [B, {self.cfg.image_size}, {self.cfg.image_size}, 3],"
                f" got {images.shape}")
        fm = self.feature_map(images)
        pooled = T.mean(self.norm(fm.values), axis=(1, 2))
        return self.head(pooled)

    def last_stage_attention(self) -> Optional[np.ndarray]:
        return self.stages[-1].pairs[-1].shifted.attn.attn.last_attention

    def keep_attention(self, flag: bool = True) -> None:
        block = self.stages[-1].pairs[-1].shifted.attn.attn
        block.keep_attention = flag


class StageBlocks(Module):
    def __init__(self, pairs: list):
        self.pairs = pairs

    def __call__(self, fm: FeatureMap) -> FeatureMap:
        for pair in self.pairs:
            fm = pair(fm)
        return fm


def global_attention(attn: MultiHeadSelfAttention, x: Tensor) -> Tensor:
    """Plain multi-head self-attention over every token of a [B, H, W, C] map."""
    b, h, w, c = x.shape
    out = attn(T.reshape(x, (b, h * w, c)))
    return T.reshape(out, (b, h, w, c))
