"""Structured-data branch: feature embedding, MHSA, position mean, projection."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import Linear, Module, MultiHeadSelfAttention, param, trunc_normal
from .tensor import DimensionError, Tensor

CATEGORICAL = "evac_zone"
CONTINUOUS = ("building_age", "building_value", "dist_track", "wind_speed")
FEATURES = (CATEGORICAL,) + CONTINUOUS
ZONES = ("A", "B", "C", "D", "E", "none")
STD_FLOOR = 1e-8


class VocabularyError(KeyError):
    pass


class StatsNotFittedError(RuntimeError):
    pass


@dataclass
class StructuredRecord:
    evac_zone: str
    building_age: float
    building_value: float
    dist_track: float
    wind_speed: float

    def validate(self) -> None:
        for name in CONTINUOUS:
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


@dataclass
class StructuredConfig:
    token_dim: int = 20
    heads: int = 5
    out_dim: int = 64
    zone_vocab: list[str] = field(default_factory=lambda: list(ZONES))
    features: list[str] = field(default_factory=lambda: list(FEATURES))
    use_mhsa: bool = True
    # Per continuous feature, in CONTINUOUS order; empty until fitted.
    means: list[float] = field(default_factory=list)
    stds: list[float] = field(default_factory=list)

    def validate(self) -> None:
        if self.token_dim % self.heads:
            raise DimensionError(f"token_dim {self.token_dim} not divisible by {self.heads} heads")
        unknown = set(self.features) - set(FEATURES)
        if unknown or not self.features:
            raise ValueError(f"feature subset must be a nonempty subset of {FEATURES}")

    @property
    def fitted(self) -> bool:
        return len(self.means) == len(CONTINUOUS) and len(self.stds) == len(CONTINUOUS)


@dataclass
class StructuredBatch:
    """Columnar form of a list of records: zone codes plus raw continuous values."""

    zone_index: np.ndarray      # [B] int
    values: np.ndarray          # [B, 4] raw, CONTINUOUS order

    def __len__(self) -> int:
        return len(self.zone_index)


def encode_records(records: Sequence[StructuredRecord], vocab: Sequence[str]) -> StructuredBatch:
    lookup = {z: i for i, z in enumerate(vocab)}
    zones = []
    for rec in records:
        if rec.evac_zone not in lookup:
            raise VocabularyError(f"evacuation zone {rec.evac_zone!r} not in vocabulary {list(vocab)}")
        zones.append(lookup[rec.evac_zone])
    values = np.array([[getattr(r, n) for n in CONTINUOUS] for r in records],
                      dtype=np.float64).reshape(len(records), len(CONTINUOUS))
    return StructuredBatch(np.array(zones, dtype=np.intp), values)


def fit_stats(records: Sequence[StructuredRecord]) -> tuple[list, list]:
    """Population mean/std of each continuous feature, std floored at 1e-8."""
    if not records:
        raise ValueError("cannot fit normalization stats on an empty split")
    values = np.array([[getattr(r, n) for n in CONTINUOUS] for r in records], dtype=np.float64)
    return values.mean(axis=0).tolist(), np.maximum(values.std(axis=0), STD_FLOOR).tolist()


def standardize(values: np.ndarray, means, stds) -> np.ndarray:
    return (values - np.asarray(means)) / np.asarray(stds)


def destandardize(z: np.ndarray, means, stds) -> np.ndarray:
    return z * np.asarray(stds) + np.asarray(means)


class StructuredExtractor(Module):
    def __init__(self, cfg: StructuredConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        d = cfg.token_dim
        self.zone_table = param(trunc_normal(rng, (len(cfg.zone_vocab), d)))
        self.cont_proj = param(trunc_normal(rng, (len(CONTINUOUS), d)))
        self.cont_bias = param(np.zeros((len(CONTINUOUS), d)))
        self.mhsa = MultiHeadSelfAttention(d, cfg.heads, rng)
        self.head = Linear(d, cfg.out_dim, rng)

    def embed(self, batch: StructuredBatch) -> Tensor:
        """[B, k, token_dim] tokens for the active features, in schema order."""
        if not self.cfg.fitted:
            raise StatsNotFittedError("normalization stats have not been fitted")
        tokens = []
        if CATEGORICAL in self.cfg.features:
            zone = T.take(self.zone_table, batch.zone_index)
            tokens.append(T.reshape(zone, (len(batch), 1, self.cfg.token_dim)))
        z = standardize(batch.values, self.cfg.means, self.cfg.stds)
        cont = [i for i, name in enumerate(CONTINUOUS) if name in self.cfg.features]
        if cont:
            idx = np.array(cont)
            proj = T.take(self.cont_proj, idx)          # [k, d]
            bias = T.take(self.cont_bias, idx)
            scaled = T.mul(Tensor(z[:, idx, None]), proj)  # [B, k, d]
            tokens.append(T.add(scaled, bias))
        return tokens[0] if len(tokens) == 1 else T.concat(tokens, axis=1)

    def __call__(self, batch: StructuredBatch) -> Tensor:
        tokens = self.embed(batch)
        if self.cfg.use_mhsa:
            tokens = self.mhsa(tokens)
        pooled = T.mean(tokens, axis=1)
        return self.head(pooled)

    def last_attention(self) -> Optional[np.ndarray]:
        return self.mhsa.last_attention
