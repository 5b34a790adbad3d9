"""Experiment protocol and the grid-search / ablation / fusion-sweep drivers."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics
from .checkpoint import Checkpoint
from .config import RunConfig, from_text, to_text
from .data import Dataset
from .fusion import MMST
from .structured import FEATURES
from .training import (TrainConfig, TrainResult, evaluate, kfold, stratified_split, to_arrays,
                       train)

GRID_LEARNING_RATES = (1e-2, 1e-3, 1e-4, 1e-5)
GRID_BATCH_SIZES = (8, 16, 32, 64)
FUSION_RATIOS = (0.70, 0.75, 0.80, 0.85, 0.90)
FEATURE_LABELS = {
    "evac_zone": "Evacuation Zone",
    "building_age": "Building Age",
    "building_value": "Building Value",
    "dist_track": "Dist. to hurricane track",
    "wind_speed": "Wind speed",
}


def build_model(cfg: RunConfig) -> MMST:
    cfg.validate()
    return MMST(copy.deepcopy(cfg.swin), copy.deepcopy(cfg.structured),
                copy.deepcopy(cfg.fusion), seed=cfg.seed)


def model_config(model: MMST, cfg: RunConfig) -> RunConfig:
    """``cfg`` with the model's (fitted) branch configs substituted in."""
    out = cfg.copy()
    out.swin = copy.deepcopy(model.swin_cfg)
    out.structured = copy.deepcopy(model.structured_cfg)
    out.fusion = copy.deepcopy(model.fusion_cfg)
    return out


def make_checkpoint(model: MMST, cfg: RunConfig, state: Optional[dict] = None) -> Checkpoint:
    state = model.state_dict() if state is None else state
    return Checkpoint(to_text(model_config(model, cfg)), {k: state[k] for k in sorted(state)})


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[MMST, RunConfig]:
    cfg = from_text(ckpt.config_text)
    model = build_model(cfg)
    model.load_state_dict(ckpt.params)
    return model, cfg


@dataclass
class ProtocolResult:
    test_report: Optional[metrics.MetricsReport]
    val_mcc_per_fold: list
    chosen_fold: int
    checkpoint: Checkpoint
    final_checkpoint: Checkpoint
    history: object
    test_indices: np.ndarray
    test_predictions: Optional[np.ndarray]


def split_for_protocol(labels: np.ndarray, seed: int, folds: int, test_fraction: float = 0.2):
    """(train_val, test, [(train, val), ...]) index arrays into the full dataset."""
    train_val, test = stratified_split(labels, test_fraction, seed)
    if folds >= 2:
        pairs = kfold(labels[train_val], folds, seed)
    else:
        tr, va = stratified_split(labels[train_val], 0.2, seed + 1)
        pairs = [(tr, va)]
    return train_val, test, [(train_val[a], train_val[b]) for a, b in pairs]


def run_protocol(data: Dataset, cfg: RunConfig, log: Optional[Callable[[str], None]] = None,
                 test_fraction: float = 0.2) -> ProtocolResult:
    """Stratified hold-out test split, k-fold (or single hold-out when folds == 1)
    training on the rest, test evaluation of the best-validation-MCC fold model."""
    labels = data.labels
    _, test, pairs = split_for_protocol(labels, cfg.seed, cfg.train.folds, test_fraction)
    tcfg = replace(cfg.train, seed=cfg.seed)
    best = None
    scores = []
    for fold, (tr, va) in enumerate(pairs):
        model = build_model(cfg)
        result: TrainResult = train(model, data.subset(tr), data.subset(va), tcfg, log)
        score = result.best_val_mcc if result.best_val_mcc is not None else -np.inf
        scores.append(result.best_val_mcc)
        if log:
            log(f"fold {fold}: best val MCC {score:.4f} at epoch {result.best_epoch}")
        if best is None or score > best[0]:
            best = (score, fold, model, result)
    _, fold, model, result = best
    final_ckpt = make_checkpoint(model, cfg, result.final_state)
    model.load_state_dict(result.best_state)
    ckpt = make_checkpoint(model, cfg)
    report, pred = None, None
    if len(test):
        _, report, pred = evaluate(model, to_arrays(data.subset(test), cfg.structured.zone_vocab),
                                   cfg.train.focal_gamma)
    return ProtocolResult(report, scores, fold, ckpt, final_ckpt, result.history, test, pred)


# Grid search

@dataclass
class Trial:
    learning_rate: float
    batch_size: int
    score: float
    error: str = ""


def cv_score(data: Dataset, cfg: RunConfig) -> float:
    """Mean best-validation MCC across the folds of the train/validation portion."""
    _, _, pairs = split_for_protocol(data.labels, cfg.seed, cfg.train.folds)
    scores = []
    for tr, va in pairs:
        result = train(build_model(cfg), data.subset(tr), data.subset(va),
                       replace(cfg.train, seed=cfg.seed))
        scores.append(result.best_val_mcc if result.best_val_mcc is not None else 0.0)
    return float(np.mean(scores))


def grid_search(data: Dataset, cfg: RunConfig, lrs: Sequence[float] = GRID_LEARNING_RATES,
                batches: Sequence[int] = GRID_BATCH_SIZES,
                evaluator: Optional[Callable[[RunConfig], float]] = None
                ) -> tuple[TrainConfig, list[Trial]]:
    """Score every (learning rate, batch size) cell; return the best TrainConfig and all trials.

    Failed cells are recorded with their error and never selected. Ties keep
    the earliest cell in grid order.
    """
    if not lrs or not batches:
        raise ValueError("grid search needs nonempty grids")
    evaluator = evaluator or (lambda c: cv_score(data, c))
    trials, best = [], None
    for lr in lrs:
        for bs in batches:
            cell = cfg.copy()
            cell.train = replace(cfg.train, learning_rate=float(lr), batch_size=int(bs))
            try:
                score = float(evaluator(cell))
                trials.append(Trial(float(lr), int(bs), score))
            except Exception as exc:  # noqa: BLE001 - a failing cell must not stop the grid
                trials.append(Trial(float(lr), int(bs), float("nan"), f"{type(exc).__name__}: {exc}"))
                continue
            if best is None or score > best[0]:
                best = (score, cell.train)
    if best is None:
        raise RuntimeError("every grid cell failed")
    return best[1], trials


def trials_tsv(trials: Sequence[Trial]) -> str:
    lines = ["learning_rate\tbatch_size\tmean_val_mcc\terror"]
    lines += [f"{t.learning_rate!r}\t{t.batch_size}\t{t.score!r}\t{t.error}" for t in trials]
    return "\n".join(lines) + "\n"


# Report tables

@dataclass
class ReportRow:
    label: str
    reports: list = field(default_factory=list)     # one MetricsReport per seed

    def mean(self) -> list[float]:
        return np.mean([r.row() for r in self.reports], axis=0).tolist()

    @property
    def mean_mcc(self) -> float:
        return self.mean()[0]


def table_tsv(rows: Sequence[ReportRow], first_column: str) -> str:
    lines = ["\t".join((first_column,) + metrics.METRIC_COLUMNS)]
    for row in rows:
        lines.append("\t".join([row.label] + [f"{v:.6f}" for v in row.mean()]))
    return "\n".join(lines) + "\n"


def per_seed_tsv(rows: Sequence[ReportRow], seeds: Sequence[int], first_column: str) -> str:
    lines = ["\t".join((first_column, "seed") + metrics.METRIC_COLUMNS)]
    for row in rows:
        for seed, rep in zip(seeds, row.reports):
            lines.append("\t".join([row.label, str(seed)] + [f"{v:.6f}" for v in rep.row()]))
    return "\n".join(lines) + "\n"


def _run_seeds(data: Dataset, cfg: RunConfig, seeds: Sequence[int], label: str,
               log: Optional[Callable[[str], None]] = None) -> ReportRow:
    row = ReportRow(label)
    for seed in seeds:
        run = cfg.copy()
        run.seed = int(seed)
        result = run_protocol(data, run)
        row.reports.append(result.test_report)
        if log:
            log(f"{label} seed={seed} test MCC={result.test_report.mcc:.4f}")
    return row


def ablation_settings(cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    """Each structured feature dropped in turn, MHSA bypass, and the full model."""
    settings = []
    for name in FEATURES:
        c = cfg.copy()
        c.structured.features = [f for f in FEATURES if f != name]
        settings.append((f"w/o {FEATURE_LABELS[name]}", c))
    c = cfg.copy()
    c.structured.features = list(FEATURES)
    c.structured.use_mhsa = False
    settings.append(("All features (w/o MHSA)", c))
    c = cfg.copy()
    c.structured.features = list(FEATURES)
    c.structured.use_mhsa = True
    settings.append(("All features", c))
    return settings


def ablate(data: Dataset, cfg: RunConfig, seeds: Sequence[int] = (0, 1, 2),
           log: Optional[Callable[[str], None]] = None) -> list[ReportRow]:
    return [_run_seeds(data, c, seeds, label, log) for label, c in ablation_settings(cfg)]


def sweep_fusion(data: Dataset, cfg: RunConfig, ratios: Sequence[float] = FUSION_RATIOS,
                 seeds: Sequence[int] = (0, 1, 2),
                 log: Optional[Callable[[str], None]] = None) -> list[ReportRow]:
    rows = []
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"fusion ratio {r} outside [0, 1]")
        c = cfg.copy()
        c.fusion.ratio = float(r)
        c.fusion.mode = "fused"
        rows.append(_run_seeds(data, c, seeds, repr(float(r)), log))
    return rows


def compare_modalities(data: Dataset, cfg: RunConfig, seeds: Sequence[int] = (0, 1, 2),
                       log: Optional[Callable[[str], None]] = None) -> list[ReportRow]:
    """Fused model at cfg's ratio against the image-only and structured-only paths."""
    rows = []
    for mode, label in (("fused", f"MMST (R={cfg.fusion.ratio})"), ("image", "image only"),
                        ("structured", "structured only")):
        c = cfg.copy()
        c.fusion.mode = mode
        rows.append(_run_seeds(data, c, seeds, label, log))
    return rows
