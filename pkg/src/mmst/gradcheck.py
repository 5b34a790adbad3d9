"""Central-difference gradient checking and the per-op / per-module check suite."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .fusion import MMST, FusionConfig
from .structured import CONTINUOUS, StructuredBatch, StructuredConfig
from .swin import SwinConfig
from .tensor import GradientError, Tensor
from .training import focal_loss

OP_TOLERANCE = 1e-6
END_TO_END_TOLERANCE = 1e-4


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
              coords: Optional[Sequence[int]] = None) -> float:
    """Max over coordinates of |a - n| / max(1e-8, |a| + |n|).

    ``a`` is the autodiff gradient of the scalar ``f(x)`` and ``n`` the central
    difference with step ``eps``. ``x.data`` is perturbed in place, so ``f``
    may also close over ``x`` (e.g. a model parameter). ``coords`` restricts the
    check to a subset of flat indices.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise GradientError(f"gradcheck needs a scalar function, got shape {out.shape}")
    if out.requires_grad:
        T.backward(out)
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    x.grad = None
    flat = x.data.reshape(-1)
    idx = range(x.size) if coords is None else coords
    worst = 0.0
    with T.no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).item()
            flat[i] = orig - eps
            lo = f(x).item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    x.requires_grad = was
    return worst


@dataclass
class CheckRow:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def op_cases(rng: np.random.Generator) -> dict:
    """Scalar-valued probes per differentiable op, keyed by op name.

    Each value is a list of (function of x, x) pairs; ops with several
    differentiable inputs get one probe per input. Random weights turn every
    output into a scalar without symmetric cancellations.
    """
    def wsum(t: Tensor, w: np.ndarray) -> Tensor:
        return T.sum(T.mul(t, Tensor(w)))

    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    w34 = rng.standard_normal((3, 4))
    w32 = rng.standard_normal((3, 2))
    w64 = rng.standard_normal((6, 4))
    w43 = rng.standard_normal((4, 3))
    bias = _rand(rng, 4)
    gamma, beta = _rand(rng, 4), _rand(rng, 4)
    x34 = _rand(rng, 3, 4)
    weight, lin_bias = _rand(rng, 4, 2), _rand(rng, 2)
    rows = rng.integers(0, 5, 4)
    cols = rng.integers(0, 4, 3)
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)))
    away_from_kink = Tensor(np.sign(rng.standard_normal((3, 4))) * rng.uniform(0.2, 1.0, (3, 4)))
    return {
        "add": [(lambda x: wsum(T.add(x, bias), w34), _rand(rng, 3, 4)),
                (lambda x: wsum(T.add(x34, x), w34), _rand(rng, 4))],
        "sub": [(lambda x: wsum(T.sub(x, x34), w34), _rand(rng, 3, 4)),
                (lambda x: wsum(T.sub(x34, x), w34), _rand(rng, 4))],
        "neg": [(lambda x: wsum(T.neg(x), w34), _rand(rng, 3, 4))],
        "mul": [(lambda x: wsum(T.mul(x, a), w34), _rand(rng, 3, 4)),
                (lambda x: wsum(T.mul(a, x), w34), _rand(rng, 4))],
        "scale": [(lambda x: wsum(T.scale(x, 0.37), w34), _rand(rng, 3, 4))],
        "exp": [(lambda x: wsum(T.exp(x), w34), _rand(rng, 3, 4))],
        "log": [(lambda x: wsum(T.log(x), w34), pos)],
        "power": [(lambda x: wsum(T.power(x, 2.5), w34), Tensor(rng.uniform(0.5, 2.0, (3, 4))))],
        "clip_min": [(lambda x: wsum(T.clip_min(x, 0.0), w34), away_from_kink)],
        "matmul": [(lambda x: wsum(T.matmul(x, b), w32), _rand(rng, 3, 4)),
                   (lambda x: wsum(T.matmul(a, x), w32), _rand(rng, 4, 2))],
        "transpose": [(lambda x: wsum(T.transpose(x, (1, 0)), w34.T), _rand(rng, 3, 4))],
        "reshape": [(lambda x: wsum(T.reshape(x, (4, 3)), w43), _rand(rng, 3, 4))],
        "roll": [(lambda x: wsum(T.roll(x, (1, -2), (0, 1)), w34), _rand(rng, 3, 4))],
        "concat": [(lambda x: wsum(T.concat([x, a], axis=0), w64), _rand(rng, 3, 4)),
                   (lambda x: wsum(T.concat([a, x], axis=0), w64), _rand(rng, 3, 4))],
        "take": [(lambda x: wsum(T.take(x, rows), w43), _rand(rng, 5, 3))],
        "pick": [(lambda x: wsum(T.pick(x, cols), w34[0, :3]), _rand(rng, 3, 4))],
        "sum": [(lambda x: wsum(T.sum(x, axis=1), w34[:, 0]), _rand(rng, 3, 4))],
        "mean": [(lambda x: wsum(T.mean(x, axis=0), w34[0]), _rand(rng, 3, 4))],
        "softmax": [(lambda x: wsum(T.softmax(x, axis=-1), w34), _rand(rng, 3, 4))],
        "layer_norm": [(lambda x: wsum(T.layer_norm(x, gamma, beta), w34), _rand(rng, 3, 4)),
                       (lambda x: wsum(T.layer_norm(x34, x, beta), w34), _rand(rng, 4)),
                       (lambda x: wsum(T.layer_norm(x34, gamma, x), w34), _rand(rng, 4))],
        "gelu": [(lambda x: wsum(T.gelu(x), w34), _rand(rng, 3, 4))],
        "linear": [(lambda x: wsum(T.linear(x, weight, lin_bias), w32), _rand(rng, 3, 4)),
                   (lambda x: wsum(T.linear(x34, x, lin_bias), w32), _rand(rng, 4, 2)),
                   (lambda x: wsum(T.linear(x34, weight, x), w32), _rand(rng, 2))],
    }


def check_ops(seed: int = 0, trials: int = 10, eps: float = 1e-5) -> list[CheckRow]:
    """Worst error per op over ``trials`` random instances."""
    rows: dict = {}
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        for name, probes in op_cases(rng).items():
            for fn, x in probes:
                rows[name] = max(rows.get(name, 0.0), gradcheck(fn, x, eps))
    return [CheckRow(name, err, OP_TOLERANCE) for name, err in rows.items()]


# Model-level checks

def check_model(seed: int = 0) -> tuple[MMST, np.ndarray, StructuredBatch, np.ndarray]:
    """A small model at a random parameter point plus one random sample.

    The image branch is sized so stage 1 uses a real cyclic shift with its
    mask (4x4 tokens, window 2) and stage 2 the clamped window. Parameters are
    drawn well away from their initial values so that every gradient entry is
    large enough for a finite-difference comparison.
    """
    rng = np.random.default_rng([seed, 99])
    swin = SwinConfig(image_size=16, patch_size=4, embed_dim=8, stage_depths=[2, 2],
                      heads_per_stage=[2, 2], window_size=2, mlp_ratio=2.0, out_dim=8,
                      weight_init="fan_in")
    structured = StructuredConfig(token_dim=10, heads=5, out_dim=8)
    structured.means = rng.normal(0.0, 1.0, len(CONTINUOUS)).tolist()
    structured.stds = rng.uniform(0.5, 2.0, len(CONTINUOUS)).tolist()
    model = MMST(swin, structured, FusionConfig(ratio=0.8, feature_dim=8), seed=seed)
    for _, p in model.named_parameters():
        p.data = p.data + rng.normal(0.0, 0.3, p.shape)
    images = rng.uniform(0.0, 1.0, (1, 16, 16, 3))
    batch = StructuredBatch(rng.integers(0, len(structured.zone_vocab), 1),
                            rng.normal(0.0, 1.5, (1, len(CONTINUOUS))))
    labels = rng.integers(0, 3, 1)
    return model, images, batch, labels


def _loss_fn(model: MMST, images, batch, labels) -> Callable[[Tensor], Tensor]:
    alpha = [0.5, 1.0, 1.5]
    return lambda _: focal_loss(T.softmax(model(images, batch), axis=-1), labels, 2.0, alpha)


def _check_params(f, params: list, rng: np.random.Generator, per_tensor: Optional[int],
                  eps: float) -> float:
    worst = 0.0
    for p in params:
        coords = None
        if per_tensor is not None and p.size > per_tensor:
            coords = rng.choice(p.size, per_tensor, replace=False)
        worst = max(worst, gradcheck(f, p, eps, coords))
    return worst


def check_modules(seed: int = 0, per_tensor: Optional[int] = 4, eps: float = 1e-5) -> list[CheckRow]:
    """Branch-level rows and the end-to-end row (focal loss through the full model)."""
    model, images, batch, labels = check_model(seed)
    rng = np.random.default_rng([seed, 7])
    image_params = model.image.parameters()
    structured_params = model.structured.parameters()
    rows = [
        CheckRow("swin_image_features",
                 _check_params(lambda _: T.sum(model.image(images)), image_params, rng,
                               per_tensor, eps), END_TO_END_TOLERANCE),
        CheckRow("structured_features (embedding table)",
                 gradcheck(lambda _: T.sum(model.structured(batch)), model.structured.zone_table,
                           eps), OP_TOLERANCE),
        CheckRow("structured_features",
                 _check_params(lambda _: T.sum(model.structured(batch)), structured_params, rng,
                               per_tensor, eps), END_TO_END_TOLERANCE),
    ]
    loss = _loss_fn(model, images, batch, labels)
    rows.append(CheckRow("fusion_classifier",
                         _check_params(loss, model.classifier.parameters(), rng, None, eps),
                         END_TO_END_TOLERANCE))
    rows.append(CheckRow("mmst_forward + focal_loss (end-to-end)",
                         _check_params(loss, model.parameters(), rng, per_tensor, eps),
                         END_TO_END_TOLERANCE))
    return rows


def check_focal_loss(seed: int = 0, trials: int = 10, eps: float = 1e-5) -> CheckRow:
    """Focal loss w.r.t. logits through softmax, gamma 0 and 2, with class weights."""
    worst = 0.0
    for t in range(trials):
        rng = np.random.default_rng([seed, 50, t])
        labels = rng.integers(0, 3, 4)
        alpha = rng.uniform(0.5, 2.0, 3)
        for gamma in (0.0, 2.0):
            fn = lambda x, g=gamma: focal_loss(T.softmax(x, axis=-1), labels, g, alpha)  # noqa: E731
            worst = max(worst, gradcheck(fn, _rand(rng, 4, 3), eps))
    return CheckRow("focal_loss", worst, OP_TOLERANCE)


def run_all(seed: int = 0, trials: int = 10, per_tensor: Optional[int] = 4) -> list[CheckRow]:
    """Every op once, focal loss, each branch, and the end-to-end model."""
    return (check_ops(seed, trials) + [check_focal_loss(seed, trials)]
            + check_modules(seed, per_tensor))


def format_rows(rows: Sequence[CheckRow]) -> str:
    lines = ["check\tmax_rel_error\ttolerance\tstatus"]
    lines += [f"{r.name}\t{r.error:.3e}\t{r.tolerance:.0e}\t{'pass' if r.passed else 'FAIL'}"
              for r in rows]
    return "\n".join(lines) + "\n"
