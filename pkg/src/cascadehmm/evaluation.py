"""Confusion matrices, per-class F1, macro F1 and report formatting.

One pooled confusion matrix accumulates every (sample, year) pair; macro F1
averages per-class F1 over all classes, counting classes with no support as
zero, which penalizes models that never predict rare classes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = ["ConfusionMatrix", "F1Report", "score", "f1_report"]


@dataclass
class ConfusionMatrix:
    """Integer counts, rows indexed by reference label, columns by prediction."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"counts must be square, got shape {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["ref\\pred"] + [str(c) for c in range(self.num_classes)])
            for r in range(self.num_classes):
                writer.writerow([str(r)] + [int(v) for v in self.counts[r]])


def score(predictions: Sequence[int], references: Sequence[int], num_classes: int) -> ConfusionMatrix:
    """Pooled confusion matrix over flat, aligned label sequences."""
    preds = np.asarray(list(predictions), dtype=np.int64)
    refs = np.asarray(list(references), dtype=np.int64)
    if preds.shape != refs.shape or preds.ndim != 1:
        raise ValueError(f"predictions and references must be equal-length vectors, got {preds.shape} vs {refs.shape}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    if preds.size:
        if preds.min() < 0 or preds.max() >= num_classes or refs.min() < 0 or refs.max() >= num_classes:
            raise ValueError(f"labels must lie in [0, {num_classes})")
        np.add.at(counts, (refs, preds), 1)
    return ConfusionMatrix(counts)


@dataclass
class F1Report:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    mean_f1: float
    accuracy: float

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "mean_f1": self.mean_f1,
            "accuracy": self.accuracy,
            "per_class": [
                {
                    "class": c,
                    "precision": float(self.precision[c]),
                    "recall": float(self.recall[c]),
                    "f1": float(self.f1[c]),
                    "support": int(self.support[c]),
                }
                for c in range(len(self.f1))
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def format_table(self, class_names: Sequence[str] | None = None) -> str:
        C = len(self.f1)
        names = [str(c) for c in range(C)] if class_names is None else [str(n) for n in class_names]
        width = max(5, max(len(n) for n in names))
        lines = [f"{'class':>{width}}  {'prec':>6}  {'rec':>6}  {'f1':>6}  {'support':>7}"]
        for c in range(C):
            lines.append(
                f"{names[c]:>{width}}  {self.precision[c]:6.3f}  {self.recall[c]:6.3f}  "
                f"{self.f1[c]:6.3f}  {int(self.support[c]):7d}"
            )
        lines.append(f"{'mF1':>{width}}  {self.mean_f1:6.4f}")
        lines.append(f"{'acc':>{width}}  {self.accuracy:6.4f}")
        return "\n".join(lines)


def f1_report(cm: ConfusionMatrix) -> F1Report:
    """Per-class precision/recall/F1 plus unweighted macro F1 and accuracy.

    Classes where precision + recall is zero (including zero-support
    classes) score F1 = 0 rather than being dropped from the mean.
    """
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    pred_totals = counts.sum(axis=0)
    ref_totals = counts.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_totals > 0, tp / pred_totals, 0.0)
        recall = np.where(ref_totals > 0, tp / ref_totals, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2.0 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    total = counts.sum()
    accuracy = float(tp.sum() / total) if total > 0 else 0.0
    return F1Report(
        precision=precision,
        recall=recall,
        f1=f1,
        support=ref_totals.astype(np.int64),
        mean_f1=float(f1.mean()),
        accuracy=accuracy,
    )
