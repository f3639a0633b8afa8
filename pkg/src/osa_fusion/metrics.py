"""Classification metrics for the four-class severity task."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError
from .text import SEVERITIES


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """1-based argmax; ``np.argmax`` already resolves ties to the lowest index."""
    return np.argmax(np.asarray(probs), axis=1) + 1


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC with tied scores counted as half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(len(s))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[i:j + 1] = 0.5 * (i + j) + 1.0
        i = j + 1
    r = np.empty_like(ranks)
    r[order] = ranks
    return float((r[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores: np.ndarray, positive: np.ndarray) -> float:
    """Area under the precision-recall curve with step interpolation.

    Thresholds run over the distinct scores in decreasing order; each step
    contributes (recall gain) x (precision at that threshold).
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], positive[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    variance: float | None = None
    aupr: list[float] = field(default_factory=list)
    class_accuracy: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)

    def row(self, percent: bool = True) -> list:
        """Values in the column order of the results table."""
        k = 100.0 if percent else 1.0
        out = [self.accuracy * k, self.precision * k, self.recall * k, self.f1 * k, self.auc * k,
               self.variance if self.variance is not None else float("nan")]
        for a, c in zip(self.aupr, self.class_accuracy):
            out += [a * k, c * k]
        return out


def table_header(class_names: Sequence[str] = SEVERITIES) -> list[str]:
    cols = ["Acc", "Pre", "Rec", "F1", "AUC", "Var"]
    for name in class_names:
        cols += [f"{name}_AUPR", f"{name}_Acc"]
    return cols


def evaluate(predictions, labels, n_classes: int = 4) -> MetricsReport:
    probs = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(probs) != len(y):
        raise InputError(f"{len(probs)} predictions for {len(y)} labels")
    if len(y) == 0:
        raise InputError("cannot evaluate an empty prediction set")
    if probs.shape[1] != n_classes:
        raise InputError(f"predictions have {probs.shape[1]} classes, expected {n_classes}")
    pred = predict_labels(probs)
    support = np.bincount(y - 1, minlength=n_classes).astype(np.float64)
    prec, rec, f1 = np.zeros(n_classes), np.zeros(n_classes), np.zeros(n_classes)
    aucs, auprs = [], []
    for c in range(1, n_classes + 1):
        tp = np.sum((pred == c) & (y == c))
        n_pred = np.sum(pred == c)
        prec[c - 1] = tp / n_pred if n_pred else 0.0
        rec[c - 1] = tp / support[c - 1] if support[c - 1] else 0.0
        denom = prec[c - 1] + rec[c - 1]
        f1[c - 1] = 2 * prec[c - 1] * rec[c - 1] / denom if denom else 0.0
        aucs.append(binary_auc(probs[:, c - 1], y == c))
        auprs.append(average_precision(probs[:, c - 1], y == c))
    w = support / support.sum()
    return MetricsReport(
        accuracy=float(np.mean(pred == y)),
        precision=float(w @ prec),
        recall=float(w @ rec),
        f1=float(w @ f1),
        auc=float(np.nanmean(aucs)) if not np.all(np.isnan(aucs)) else float("nan"),
        aupr=[float(a) for a in auprs],
        class_accuracy=[float(r) for r in rec],
    )


def cross_seed_variance(run_accuracies: Sequence[float]) -> float:
    """Population variance of per-seed accuracies, in squared percentage points."""
    acc = np.asarray(run_accuracies, dtype=np.float64)
    if acc.size < 2:
        raise InputError("variance needs at least two runs")
    return float(np.var(acc * 100.0))


def aggregate(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean of every rate across runs, with the cross-seed accuracy variance."""
    if not reports:
        raise InputError("nothing to aggregate")
    mean = lambda xs: float(np.mean(xs))  # noqa: E731
    return MetricsReport(
        accuracy=mean([r.accuracy for r in reports]),
        precision=mean([r.precision for r in reports]),
        recall=mean([r.recall for r in reports]),
        f1=mean([r.f1 for r in reports]),
        auc=mean([r.auc for r in reports]),
        variance=cross_seed_variance([r.accuracy for r in reports]) if len(reports) > 1 else None,
        aupr=[float(v) for v in np.mean([r.aupr for r in reports], axis=0)],
        class_accuracy=[float(v) for v in np.mean([r.class_accuracy for r in reports], axis=0)],
    )


def write_key_values(path, report: MetricsReport, class_names: Sequence[str] = SEVERITIES) -> None:
    lines = [f"{k}={getattr(report, k)!r}" for k in ("accuracy", "precision", "recall", "f1", "auc", "variance")]
    for name, a, c in zip(class_names, report.aupr, report.class_accuracy):
        lines += [f"aupr_{name.lower()}={a!r}", f"accuracy_{name.lower()}={c!r}"]
    Path(path).write_text("\n".join(lines) + "\n")


def read_key_values(path) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            out[k] = None if v == "None" else float(v)
    return out


def write_metrics_csv(path, runs: Sequence[tuple[str, MetricsReport]], aggregate_label: str = "mean") -> None:
    """One row per seed followed by an aggregate row, values in percent."""
    reports = [r for _, r in runs]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", *table_header()])
        for label, r in runs:
            w.writerow([label, *(f"{v:.4f}" for v in r.row())])
        if reports:
            w.writerow([aggregate_label, *(f"{v:.4f}" for v in aggregate(reports).row())])
