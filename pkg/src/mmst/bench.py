"""Windowed versus global attention: multiply-accumulate counts and wall time."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import MultiHeadSelfAttention, scaled_dot_attention
from .swin import WindowAttention, global_attention, window_partition
from .tensor import DimensionError, Tensor


@dataclass
class BenchRow:
    side: int
    window: int
    tokens: int
    wmsa_core_macs: int       # QK^T and AV only
    global_core_macs: int
    wmsa_total_macs: int      # including the Q/K/V and output projections
    global_total_macs: int
    wmsa_seconds: float
    global_seconds: float


def _core(tokens: Tensor, heads: int) -> None:
    g, n, d = tokens.shape
    x = T.transpose(T.reshape(tokens, (g, n, heads, d // heads)), (0, 2, 1, 3))
    scaled_dot_attention(x, x, x)


def _timed_macs(fn, repeats: int) -> tuple[int, float]:
    with T.count_macs() as macs:
        fn()
    best = np.inf
    for _ in range(repeats):
        started = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - started)
    return macs[0], float(best)


def bench_one(side: int, window: int, dim: int = 32, heads: int = 2, seed: int = 0,
              repeats: int = 3) -> BenchRow:
    if side < 1 or window < 1 or (side % window and window < side):
        raise DimensionError(f"a {side}x{side} map cannot be tiled by {window}x{window} windows")
    if dim % heads:
        raise DimensionError(f"width {dim} is not divisible by {heads} heads")
    m = min(window, side)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, side, side, dim)))
    windowed = WindowAttention(dim, heads, m, 0, np.random.default_rng([seed, 1]))
    full = MultiHeadSelfAttention(dim, heads, np.random.default_rng([seed, 1]))
    with T.no_grad():
        w_core, _ = _timed_macs(lambda: _core(window_partition(x, m), heads), 0)
        g_core, _ = _timed_macs(lambda: _core(T.reshape(x, (1, side * side, dim)), heads), 0)
        w_total, w_sec = _timed_macs(lambda: windowed(x), repeats)
        g_total, g_sec = _timed_macs(lambda: global_attention(full, x), repeats)
    return BenchRow(side, m, side * side, w_core, g_core, w_total, g_total, w_sec, g_sec)


def bench_attention(sides: Sequence[int] = (8, 16), windows: Sequence[int] = (4,),
                    dim: int = 32, heads: int = 2, seed: int = 0, repeats: int = 3) -> list[BenchRow]:
    return [bench_one(s, m, dim, heads, seed, repeats) for m in windows for s in sides]


def growth(rows: Sequence[BenchRow], small: int, large: int, window: int) -> tuple[float, float]:
    """(W-MSA, global) core-MAC ratios between two map sides at one window size."""
    by_side = {r.side: r for r in rows if r.window == min(window, r.side)}
    a, b = by_side[small], by_side[large]
    return b.wmsa_core_macs / a.wmsa_core_macs, b.global_core_macs / a.global_core_macs


def table_tsv(rows: Sequence[BenchRow]) -> str:
    lines = ["side\twindow\ttokens\twmsa_core_macs\tglobal_core_macs\twmsa_total_macs"
             "\tglobal_total_macs\twmsa_seconds\tglobal_seconds"]
    for r in rows:
        lines.append(f"{r.side}\t{r.window}\t{r.tokens}\t{r.wmsa_core_macs}\t{r.global_core_macs}"
                     f"\t{r.wmsa_total_macs}\t{r.global_total_macs}"
                     f"\t{r.wmsa_seconds:.6f}\t{r.global_seconds:.6f}")
    return "\n".join(lines) + "\n"
