"""Parameter containers and the layers shared by both feature extractors."""
from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


INIT_SCHEMES = ("trunc_normal", "fan_in")


class Init:
    """A random source plus a weight scheme.

    ``trunc_normal`` draws every weight with std 0.02; ``fan_in`` uses
    std 1/sqrt(fan_in), which keeps narrow networks out of the near-linear
    regime at the start of training.
    """

    def __init__(self, rng: np.random.Generator, scheme: str = "trunc_normal"):
        if scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {scheme!r}; choose from {INIT_SCHEMES}")
        self.rng = rng
        self.scheme = scheme

    def weight(self, shape) -> np.ndarray:
        std = 0.02 if self.scheme == "trunc_normal" else 1.0 / math.sqrt(shape[0])
        return trunc_normal(self.rng, shape, std)


def as_init(source) -> Init:
    return source if isinstance(source, Init) else Init(source)


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Module:
    """Minimal module tree: parameters are Tensor attributes, children are Module attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={missing} unexpected={extra}")
        values = {name: np.asarray(state[name], dtype=np.float64) for name in own}
        for name, p in own.items():
            if values[name].shape != p.shape:
                raise DimensionError(f"parameter {name}: checkpoint shape {values[name].shape}"
                                     f" != model shape {p.shape}")
        for name, p in own.items():
            p.data = values[name].copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True):
        self.weight = param(as_init(rng).weight((d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """linear -> gelu -> linear."""

    def __init__(self, dim: int, hidden: int, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: Optional[np.ndarray] = None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k) + mask) v over the last two axes.

    Returns (output, attention probabilities).
    """
    d_k = q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = T.scale(T.matmul(q, T.transpose(k, axes)), 1.0 / math.sqrt(d_k))
    if mask is not None:
        scores = T.add(scores, Tensor(mask))
    probs = T.softmax(scores, axis=-1)
    return T.matmul(probs, v), probs


class MultiHeadSelfAttention(Module):
    """Q = XW^Q, K = XW^K, V = XW^V; heads concatenated and projected by W^O.

    Input is [batch, n, dim]. ``mask`` broadcasts against [batch, heads, n, n].
    """

    def __init__(self, dim: int, heads: int, rng):
        if dim % heads:
            raise DimensionError(f"width {dim} is not divisible by {heads} heads")
        self.heads = heads
        init = as_init(rng)
        self.w_q = param(init.weight((dim, dim)))
        self.w_k = param(init.weight((dim, dim)))
        self.w_v = param(init.weight((dim, dim)))
        self.proj = Linear(dim, dim, rng)
        self.keep_attention = False
        self.last_attention: Optional[np.ndarray] = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return T.transpose(T.reshape(x, (b, n, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        b, n, d = x.shape
        if d % self.heads:
            raise DimensionError(f"width {d} is not divisible by {self.heads} heads")
        q = self._split(T.matmul(x, self.w_q))
        k = self._split(T.matmul(x, self.w_k))
        v = self._split(T.matmul(x, self.w_v))
        out, probs = scaled_dot_attention(q, k, v, mask)
        if self.keep_attention:
            self.last_attention = probs.data
        merged = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, d))
        return self.proj(merged)
