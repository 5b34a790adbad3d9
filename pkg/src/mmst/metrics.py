"""Confusion-matrix metrics (precision, recall, SW-F1, MCC) and Krippendorff's alpha.

Zero-denominator convention: any precision, recall, F1 or MCC whose
denominator is zero evaluates to 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

METRIC_COLUMNS = ("MCC", "SW-F1", "Accuracy", "Precision", "Recall")


def confusion(y_true: Sequence[int], y_pred: Sequence[int], k: int = 3) -> np.ndarray:
    """K x K counts; entry [i, j] counts true class i predicted as class j."""
    if k < 2:
        raise ValueError("a confusion matrix needs at least two classes")
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.size} true vs {y_pred.size} predicted labels")
    for name, labels in (("true", y_true), ("predicted", y_pred)):
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValueError(f"{name} label out of range [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den != 0)
    return out


def per_class(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-vs-rest precision, recall and F1 for every class."""
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1


def precision_recall(cm: np.ndarray, averaging: str = "macro"):
    """(precision, recall, per-class precision, per-class recall)."""
    p, r, _ = per_class(cm)
    if averaging == "macro":
        return float(p.mean()), float(r.mean()), p, r
    if averaging == "weighted":
        w = np.asarray(cm).sum(axis=1) / max(np.asarray(cm).sum(), 1)
        return float(w @ p), float(w @ r), p, r
    raise ValueError(f"unknown averaging {averaging!r}")


def sw_f1(cm: np.ndarray) -> float:
    """Support-weighted F1: sum over classes of (n_i / N) * F1_i."""
    cm = np.asarray(cm)
    n = cm.sum()
    if n == 0:
        raise ValueError("sw_f1 of an empty confusion matrix")
    _, _, f1 = per_class(cm)
    return float((cm.sum(axis=1) / n) @ f1)


def mcc_binary(tp: float, tn: float, fp: float, fn: float) -> float:
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return 0.0
    return float((tp * tn - fp * fn) / np.sqrt(den))


def mcc(cm: np.ndarray) -> float:
    """Matthews correlation for K classes; reduces to the TP/TN/FP/FN form at K = 2."""
    cm = np.asarray(cm, dtype=np.float64)
    s = cm.sum()
    if s == 0:
        raise ValueError("mcc of an empty confusion matrix")
    c = np.trace(cm)
    p = cm.sum(axis=0)
    t = cm.sum(axis=1)
    den_p = s * s - p @ p
    den_t = s * s - t @ t
    if den_p == 0 or den_t == 0:
        return 0.0
    value = (c * s - p @ t) / np.sqrt(den_p * den_t)
    return float(np.clip(value, -1.0, 1.0))


def accuracy(cm: np.ndarray) -> float:
    cm = np.asarray(cm)
    return float(np.trace(cm) / cm.sum()) if cm.sum() else 0.0


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    sw_f1: float
    mcc: float
    per_class_precision: list = field(default_factory=list)
    per_class_recall: list = field(default_factory=list)
    per_class_f1: list = field(default_factory=list)
    support: list = field(default_factory=list)

    def row(self) -> list[float]:
        """Values in METRIC_COLUMNS order."""
        return [self.mcc, self.sw_f1, self.accuracy, self.precision, self.recall]

    def format(self) -> str:
        lines = [f"{name}\t{value:.6f}" for name, value in zip(METRIC_COLUMNS, self.row())]
        lines.append("class\tprecision\trecall\tf1\tsupport")
        for i, (p, r, f, n) in enumerate(zip(self.per_class_precision, self.per_class_recall,
                                              self.per_class_f1, self.support)):
            lines.append(f"{i}\t{p:.6f}\t{r:.6f}\t{f:.6f}\t{n}")
        return "\n".join(lines)


def report(y_true, y_pred, k: int = 3) -> MetricsReport:
    cm = confusion(y_true, y_pred, k)
    if cm.sum() == 0:
        raise ValueError("cannot report metrics on zero samples")
    p, r, f1 = per_class(cm)
    return MetricsReport(
        accuracy=accuracy(cm), precision=float(p.mean()), recall=float(r.mean()),
        sw_f1=sw_f1(cm), mcc=mcc(cm), per_class_precision=p.tolist(),
        per_class_recall=r.tolist(), per_class_f1=f1.tolist(),
        support=cm.sum(axis=1).astype(int).tolist())


def ordinal_distance_matrix(values: Sequence, n_by_value: np.ndarray) -> np.ndarray:
    """Krippendorff's ordinal metric from the marginal value counts.

    delta(c, k) = (sum_{g=c..k} n_g - (n_c + n_k) / 2) ** 2 for c <= k.
    """
    m = len(values)
    cum = np.concatenate([[0.0], np.cumsum(n_by_value)])
    d = np.zeros((m, m))
    for c in range(m):
        for k in range(c, m):
            v = (cum[k + 1] - cum[c] - (n_by_value[c] + n_by_value[k]) / 2.0) ** 2
            d[c, k] = d[k, c] = v
    return d


def coincidence_matrix(units: Sequence[Sequence], values: Sequence) -> np.ndarray:
    index = {v: i for i, v in enumerate(values)}
    o = np.zeros((len(values), len(values)))
    for unit in units:
        m_u = len(unit)
        if m_u < 2:
            continue
        codes = [index[v] for v in unit]
        for a in range(m_u):
            for b in range(m_u):
                if a != b:
                    o[codes[a], codes[b]] += 1.0 / (m_u - 1)
    return o


def krippendorff_alpha(units: Sequence[Sequence], level: str = "ordinal") -> float:
    """Alpha = 1 - D_o / D_e from the coincidence matrix of pairable values.

    ``units`` holds, per item, the labels the annotators assigned (missing
    labels simply omitted). Items with fewer than two labels are ignored.
    """
    pairable = [list(u) for u in units if len(u) >= 2]
    if len(pairable) < 2:
        raise ValueError("krippendorff_alpha needs at least 2 items with 2+ annotations")
    values = sorted({v for u in pairable for v in u})
    o = coincidence_matrix(pairable, values)
    n_c = o.sum(axis=1)
    n = n_c.sum()
    if level == "ordinal":
        delta = ordinal_distance_matrix(values, n_c)
    elif level == "nominal":
        delta = 1.0 - np.eye(len(values))
    elif level == "interval":
        v = np.asarray(values, dtype=np.float64)
        delta = (v[:, None] - v[None, :]) ** 2
    else:
        raise ValueError(f"unknown level of measurement {level!r}")
    d_observed = float((o * delta).sum())
    d_expected = float((np.outer(n_c, n_c) * delta).sum() / (n - 1))
    if d_expected == 0:
        return 1.0
    return 1.0 - d_observed / d_expected
