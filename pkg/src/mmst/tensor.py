"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and
a backward rule. :func:`backward` walks the graph in reverse topological
order and accumulates (sums) gradients into every tensor that requires them.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "ComputationRecord", "DimensionError", "GradientError",
    "tensor", "constant", "add", "sub", "neg", "mul", "scale", "matmul",
    "transpose", "reshape", "sum", "mean", "exp", "log", "power", "softmax",
    "layer_norm", "gelu", "linear", "roll", "concat", "take", "pick",
    "clip_min", "backward", "trace", "count_macs", "flip_backward", "no_grad",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Raised when backward is requested on an invalid loss."""


# Ops whose backward rule is negated; used only to prove the gradient
# checker catches a broken rule.
_FLIPPED: set[str] = set()

# Every differentiable public op; ``linear`` is composed from matmul and add.
DIFFERENTIABLE_OPS = (
    "add", "sub", "neg", "mul", "scale", "exp", "log", "power", "clip_min", "matmul",
    "transpose", "reshape", "roll", "concat", "take", "pick", "sum", "mean", "softmax",
    "layer_norm", "gelu", "linear",
)

_mac_counter: Optional[list] = None
_grad_enabled = True


class Tensor:
    """An n-dimensional float64 array that can carry a gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Optional[Callable] = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _make(data: np.ndarray, parents: tuple, rule: Callable, op: str) -> Tensor:
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, True, parents, rule, op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    p = float(p)
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "power")


def clip_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); the gradient passes only where a > lo. NaN propagates."""
    keep = ~(a.data <= lo)
    return _make(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clip_min")


# Linear algebra and shape manipulation

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over any leading axes."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}") from None
    if _mac_counter is not None:
        _mac_counter[0] += int(np.prod(out.shape)) * a.shape[-1]
    ad, bd = a.data, b.data

    def rule(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, ad.shape),
                None if gb is None else _unbroadcast(gb, bd.shape))

    return _make(out, (a, b), rule, "matmul")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def roll(a: Tensor, shift: Sequence[int], axes: Sequence[int]) -> Tensor:
    shift, axes = tuple(shift), tuple(axes)
    back = tuple(-s for s in shift)
    return _make(np.roll(a.data, shift, axes), (a,),
                 lambda g: (np.roll(g, back, axes),), "roll")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [constant(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), rule, "concat")


def take(a: Tensor, indices) -> Tensor:
    """Rows of ``a`` selected by integer ``indices`` (an embedding lookup)."""
    idx = np.asarray(indices, dtype=np.intp)
    src = a.shape

    def rule(g):
        out = np.zeros(src)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), rule, "take")


def pick(a: Tensor, indices) -> Tensor:
    """For a [n, k] tensor, return the length-n vector a[i, indices[i]]."""
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(a.shape[0])
    src = a.shape

    def rule(g):
        out = np.zeros(src)
        out[rows, idx] = g
        return (out,)

    return _make(a.data[rows, idx], (a,), rule, "pick")


# Reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))
    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,),
                 lambda g: (np.broadcast_to(np.reshape(g, kept), src).copy(),), "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))
    count = int(np.prod([src[i] for i in axes])) if axes else 1
    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,),
                 lambda g: (np.broadcast_to(np.reshape(g, kept) / count, src).copy(),),
                 "mean")


# Neural-network primitives

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), rule, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma`` and ``beta``."""
    x, gamma, beta = constant(x), constant(gamma), constant(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def rule(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), rule, "layer_norm")


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight + bias, with weight stored as [in, out]."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# Graph traversal

class ComputationRecord:
    """Operations reachable from a loss, in topological order (inputs first)."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def trace(loss: Tensor) -> ComputationRecord:
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return ComputationRecord(order)


def backward(loss: Tensor, record: Optional[ComputationRecord] = None) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient."""
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss is detached from any tensor that requires grad")
    record = record or trace(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        flip = node.op in _FLIPPED
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if flip:
                pg = -pg
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates performed by :func:`matmul` inside the block.

    Yields a one-element list whose entry holds the running count.
    """
    global _mac_counter
    previous = _mac_counter
    _mac_counter = [0]
    try:
        yield _mac_counter
    finally:
        if previous is not None:
            previous[0] += _mac_counter[0]
        _mac_counter = previous


@contextlib.contextmanager
def flip_backward(*ops: str):
    """Negate the backward rule of the named ops (mutation-testing hook)."""
    added = set(ops) - _FLIPPED
    _FLIPPED.update(added)
    try:
        yield
    finally:
        _FLIPPED.difference_update(added)


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
