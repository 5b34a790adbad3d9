"""Focal loss, Adam, step LR schedule, stratified splitting and the training loop."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics
from . import tensor as T
from .data import Dataset, fit_normalization
from .fusion import MMST, NUM_CLASSES, predict
from .nn import Module
from .structured import StructuredBatch, encode_records
from .tensor import Tensor

PROB_FLOOR = 1e-12


class StratificationError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 1e-4
    epochs: int = 20
    lr_step: int = 5
    lr_gamma: float = 0.85
    focal_gamma: float = 2.0
    focal_alpha: list[float] = field(default_factory=list)   # empty: inverse class frequency
    seed: int = 0
    folds: int = 5

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_gamma <= 1:
            raise ValueError("lr_gamma must lie in (0, 1]")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if self.epochs < 0 or self.lr_step < 1:
            raise ValueError("epochs must be >= 0 and lr_step >= 1")
        if self.folds < 1:
            raise ValueError("folds must be >= 1")


# Loss

def focal_loss(probs, labels, gamma: float = 2.0, alpha: Optional[Sequence[float]] = None) -> Tensor:
    """Mean over samples of -alpha[y] * (1 - p_y)^gamma * log(p_y).

    ``probs`` is [B, K] (or a single [K] distribution); ``labels`` are class indices.
    """
    probs = T.constant(probs)
    if probs.ndim == 1:
        probs = T.reshape(probs, (1, probs.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = probs.shape[1]
    if labels.shape[0] != probs.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {probs.shape[0]} distributions")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    p = T.clip_min(T.pick(probs, labels), PROB_FLOOR)
    loss = T.neg(T.log(p))
    if gamma != 0:
        loss = T.mul(T.power(T.sub(1.0, p), gamma), loss)
    if alpha is not None:
        loss = T.mul(Tensor(np.asarray(alpha, dtype=np.float64)[labels]), loss)
    return T.mean(loss)


def inverse_frequency_alpha(labels: Sequence[int], k: int = NUM_CLASSES) -> list[float]:
    """Per-class weights proportional to 1 / count, normalized to mean 1."""
    counts = np.maximum(np.bincount(np.asarray(labels, dtype=np.int64), minlength=k), 1)
    inv = 1.0 / counts
    return (inv / inv.mean()).tolist()


# Optimizer and schedule

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam with decoupled weight decay, updating ``params`` in place.

    ``params`` and ``grads`` map names to arrays; entries whose gradient is
    None are left untouched.
    """
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"{name}: optimizer state shape {m.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            step = step + lr * weight_decay * p
        p -= step


class Adam:
    def __init__(self, module: Module, weight_decay: float = 0.0):
        self.named = dict(module.named_parameters())
        self.weight_decay = weight_decay
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.named.values():
            p.grad = None

    def step(self, lr: float) -> None:
        params = {n: p.data for n, p in self.named.items()}
        grads = {n: p.grad for n, p in self.named.items()}
        adam_step(params, grads, self.state, lr, self.weight_decay)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.learning_rate * cfg.lr_gamma ** (epoch // cfg.lr_step)


# Splitting

def _largest_remainder(counts: np.ndarray, fraction: float) -> np.ndarray:
    """Per-class integer takes near counts * fraction whose sum is the rounded total."""
    exact = counts * fraction
    take = np.floor(exact + 0.5).astype(np.int64)
    target = int(math.floor(counts.sum() * fraction + 0.5))
    while take.sum() > target:
        i = int(np.argmin(np.where(take > 0, exact - take, np.inf)))
        take[i] -= 1
    while take.sum() < target:
        i = int(np.argmax(np.where(take < counts, exact - take, -np.inf)))
        take[i] += 1
    return take


def stratified_split(labels: Sequence[int], test_fraction: float = 0.2,
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(train_val indices, test indices), each sorted, preserving class proportions."""
    labels = np.asarray(labels, dtype=np.int64)
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    classes = np.unique(labels)
    if test_fraction > 0:
        need = math.ceil(1.0 / test_fraction - 1e-9)
        for c in classes:
            n_c = int((labels == c).sum())
            if n_c < need:
                raise StratificationError(
                    f"class {c} has {n_c} samples; stratifying at {test_fraction} needs {need}")
    counts = np.array([(labels == c).sum() for c in classes])
    take = _largest_remainder(counts, test_fraction)
    rng = np.random.default_rng(seed)
    test = []
    for c, t in zip(classes, take):
        members = rng.permutation(np.flatnonzero(labels == c))
        test.extend(members[:t].tolist())
    test = np.sort(np.array(test, dtype=np.int64))
    train = np.setdiff1d(np.arange(labels.size), test)
    return train, test


def kfold(labels: Sequence[int], k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """k stratified (train, validation) index pairs; validation folds partition the data."""
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ValueError("kfold needs k >= 2")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(labels.size, dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        if members.size < k:
            raise StratificationError(f"class {c} has {members.size} samples, fewer than k={k}")
        fold_of[members] = (np.arange(members.size) + offset) % k
        offset += members.size
    everything = np.arange(labels.size)
    return [(everything[fold_of != f], everything[fold_of == f]) for f in range(k)]


# Training loop

@dataclass
class TrainingHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_mcc: list = field(default_factory=list)
    val_sw_f1: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def values(self) -> dict:
        """Everything except wall time (which is not reproducible)."""
        return {k: list(v) for k, v in vars(self).items() if k != "epoch_seconds"}

    def to_tsv(self) -> str:
        lines = ["epoch\ttrain_loss\tval_loss\tval_mcc\tval_sw_f1\tval_accuracy"]
        for i in range(len(self)):
            cells = [self.train_loss[i], self.val_loss[i], self.val_mcc[i],
                     self.val_sw_f1[i], self.val_accuracy[i]]
            lines.append("\t".join([str(i)] + ["" if c is None else repr(c) for c in cells]))
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    final_state: dict
    best_state: dict
    best_epoch: int
    best_val_mcc: Optional[float]
    history: TrainingHistory


@dataclass
class Arrays:
    """A dataset split materialized for batched forward passes."""

    images: np.ndarray
    structured: StructuredBatch
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx: np.ndarray) -> tuple[np.ndarray, StructuredBatch, np.ndarray]:
        return (self.images[idx],
                StructuredBatch(self.structured.zone_index[idx], self.structured.values[idx]),
                self.labels[idx])


def to_arrays(dataset: Dataset, vocab: Sequence[str]) -> Arrays:
    return Arrays(dataset.images(), encode_records(dataset.records, vocab), dataset.labels)


def forward_probs(model: MMST, images, batch: StructuredBatch) -> Tensor:
    return T.softmax(model(images, batch), axis=-1)


def predict_arrays(model: MMST, data: Arrays, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """(predicted labels, class probabilities) without building a graph."""
    probs = []
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            images, batch, _ = data.batch(idx)
            probs.append(forward_probs(model, images, batch).data)
    probs = np.concatenate(probs) if probs else np.zeros((0, NUM_CLASSES))
    return predict(probs), probs


def evaluate(model: MMST, data: Arrays, gamma: float = 2.0, alpha=None,
             batch_size: int = 64) -> tuple[float, metrics.MetricsReport, np.ndarray]:
    """(mean focal loss, metrics report, predictions)."""
    pred, probs = predict_arrays(model, data, batch_size)
    with T.no_grad():
        loss = focal_loss(probs, data.labels, gamma, alpha).item()
    return loss, metrics.report(data.labels, pred), pred


def train(model: MMST, train_data: Dataset, val_data: Optional[Dataset], cfg: TrainConfig,
          log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Mini-batch training; returns final and best-validation-MCC parameters."""
    cfg.validate()
    if not len(train_data):
        raise ValueError("training split is empty")
    means, stds = fit_normalization(train_data)
    model.structured.cfg.means, model.structured.cfg.stds = means, stds
    vocab = model.structured.cfg.zone_vocab
    tr = to_arrays(train_data, vocab)
    va = to_arrays(val_data, vocab) if val_data is not None and len(val_data) else None
    alpha = list(cfg.focal_alpha) or inverse_frequency_alpha(tr.labels)
    opt = Adam(model, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history = TrainingHistory()
    best_state, best_epoch, best_mcc = model.state_dict(), -1, None

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(tr))
        total = 0.0
        for step, start in enumerate(range(0, len(tr), cfg.batch_size)):
            images, batch, labels = tr.batch(order[start:start + cfg.batch_size])
            opt.zero_grad()
            loss = focal_loss(forward_probs(model, images, batch), labels, cfg.focal_gamma, alpha)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            T.backward(loss)
            opt.step(lr)
            total += value * len(labels)
        history.train_loss.append(total / len(tr))
        if va is not None:
            vloss, rep, _ = evaluate(model, va, cfg.focal_gamma, alpha)
            history.val_loss.append(vloss)
            history.val_mcc.append(rep.mcc)
            history.val_sw_f1.append(rep.sw_f1)
            history.val_accuracy.append(rep.accuracy)
            if best_mcc is None or rep.mcc > best_mcc:
                best_mcc, best_epoch, best_state = rep.mcc, epoch, model.state_dict()
        else:
            for lst in (history.val_loss, history.val_mcc, history.val_sw_f1, history.val_accuracy):
                lst.append(None)
            best_state, best_epoch = model.state_dict(), epoch
        history.epoch_seconds.append(time.perf_counter() - started)
        if log is not None:
            log(f"epoch {epoch} lr={lr:.3g} train_loss={history.train_loss[-1]:.4f}"
                + (f" val_mcc={history.val_mcc[-1]:.4f}" if va is not None else ""))
    return TrainResult(model.state_dict(), best_state, best_epoch, best_mcc, history)


def with_overrides(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, **changes)
