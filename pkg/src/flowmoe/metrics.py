"""Multiclass evaluation metrics derived from a confusion matrix."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import LabelError


def weighted_mean(values, weights) -> float:
    """Support-weighted mean, e.g. of per-class F1 scores."""
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total == 0:
        return 0.0
    return float((values * weights).sum() / total)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.intp)
    y_pred = np.asarray(y_pred, dtype=np.intp)
    for arr, name in ((y_true, "true"), (y_pred, "predicted")):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise LabelError(f"{name} labels fall outside [0, {n_classes})")
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (y_true, y_pred), 1)
    return matrix


@dataclass
class EvalReport:
    """Per-class precision/recall/F1 plus accuracy and weighted F1.

    Rows of the confusion matrix are true classes, columns predictions.
    Classes with no predicted (or no true) positives get 0 for the affected
    metric and are listed in zero_division_classes.
    """

    class_names: list[str]
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    weighted_f1: float
    zero_division_classes: list[str]

    @classmethod
    def from_predictions(cls, y_true, y_pred, class_names) -> "EvalReport":
        n = len(class_names)
        matrix = confusion_matrix(y_true, y_pred, n)
        tp = np.diag(matrix).astype(np.float64)
        predicted = matrix.sum(axis=0).astype(np.float64)
        support = matrix.sum(axis=1)
        flagged = []
        precision = np.zeros(n)
        recall = np.zeros(n)
        f1 = np.zeros(n)
        for c in range(n):
            if predicted[c] > 0:
                precision[c] = tp[c] / predicted[c]
            if support[c] > 0:
                recall[c] = tp[c] / support[c]
            if predicted[c] == 0 or support[c] == 0:
                flagged.append(class_names[c])
            if precision[c] + recall[c] > 0:
                f1[c] = 2 * precision[c] * recall[c] / (precision[c] + recall[c])
        total = matrix.sum()
        accuracy = float(np.trace(matrix) / total) if total else 0.0
        return cls(
            class_names=list(class_names),
            confusion=matrix,
            precision=precision,
            recall=recall,
            f1=f1,
            support=support,
            accuracy=accuracy,
            weighted_f1=weighted_mean(f1, support),
            zero_division_classes=flagged,
        )

    def to_dict(self) -> dict:
        return {
            "class_names": self.class_names,
            "confusion": self.confusion.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "support": self.support.tolist(),
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "zero_division_classes": self.zero_division_classes,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(
            class_names=raw["class_names"],
            confusion=np.asarray(raw["confusion"], dtype=np.int64),
            precision=np.asarray(raw["precision"]),
            recall=np.asarray(raw["recall"]),
            f1=np.asarray(raw["f1"]),
            support=np.asarray(raw["support"], dtype=np.int64),
            accuracy=raw["accuracy"],
            weighted_f1=raw["weighted_f1"],
            zero_division_classes=raw["zero_division_classes"],
        )

    def format_table(self) -> str:
        lines = [
            f"{'class':<22} {'precision':>10} {'recall':>10} {'f1':>10} {'support':>8}"
        ]
        for i, name in enumerate(self.class_names):
            lines.append(
                f"{name:<22} {self.precision[i]:>10.5f} {self.recall[i]:>10.5f} "
                f"{self.f1[i]:>10.5f} {self.support[i]:>8d}"
            )
        lines.append("")
        lines.append(f"accuracy    {self.accuracy:.5f}")
        lines.append(f"weighted F1 {self.weighted_f1:.5f}")
        if self.zero_division_classes:
            lines.append(f"zero-division classes: {', '.join(self.zero_division_classes)}")
        return "\n".join(lines)
