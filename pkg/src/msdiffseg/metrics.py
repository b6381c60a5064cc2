"""Confusion counts and IoU / mIoU / F1.

A class absent from both prediction and ground truth (TP+FP+FN = 0) scores
1.0 and is left out of the class means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionCounts":
        z = np.zeros(num_classes, dtype=np.int64)
        return cls(z, z.copy(), z.copy())

    def present(self) -> np.ndarray:
        return (self.tp + self.fp + self.fn) > 0


def _ids(mask, C: int) -> np.ndarray:
    arr = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if arr.dtype.kind not in "iu":
        if not np.all(arr == np.round(arr)):
            raise ContractError("class masks must hold integer ids")
        arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= C):
        raise ContractError(f"class ids must lie in [0, {C})")
    return arr


def confusion(pred_mask, true_mask, C: int) -> ConfusionCounts:
    pred, true = _ids(pred_mask, C), _ids(true_mask, C)
    if pred.shape != true.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {true.shape} differ")
    matrix = np.bincount(true.ravel() * C + pred.ravel(), minlength=C * C).reshape(C, C)
    tp = np.diag(matrix).copy()
    return ConfusionCounts(tp, matrix.sum(axis=0) - tp, matrix.sum(axis=1) - tp)


def iou(counts: ConfusionCounts, c: int) -> float:
    denom = counts.tp[c] + counts.fp[c] + counts.fn[c]
    return 1.0 if denom == 0 else float(counts.tp[c] / denom)


def f1(counts: ConfusionCounts, c: int) -> float:
    denom = 2 * counts.tp[c] + counts.fp[c] + counts.fn[c]
    return 1.0 if denom == 0 else float(2 * counts.tp[c] / denom)


def _class_mean(counts: ConfusionCounts, fn) -> float:
    present = np.flatnonzero(counts.present())
    if present.size == 0:
        return 1.0
    return float(np.mean([fn(counts, int(c)) for c in present]))


def miou(counts: ConfusionCounts) -> float:
    return _class_mean(counts, iou)


def macro_f1(counts: ConfusionCounts) -> float:
    return _class_mean(counts, f1)


def report(counts: ConfusionCounts) -> dict:
    """JSON-ready metric summary."""
    return {
        "per_class": {
            str(c): {"iou": iou(counts, c), "f1": f1(counts, c)}
            for c in range(counts.num_classes)
        },
        "miou": miou(counts),
        "macro_f1": macro_f1(counts),
    }
