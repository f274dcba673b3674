"""Evaluation metrics: confusion matrices, IoU, class balance rate, ARI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .grids import LabelGrid


@dataclass
class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns predictions."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DataError(f"confusion matrix must be square, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise DataError("confusion matrix counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    def add(self, truth: LabelGrid, pred: LabelGrid) -> "ConfusionMatrix":
        """Accumulate one image; IGNORE pixels (on either side) are skipped."""
        if truth.data.shape != pred.data.shape:
            raise DataError("truth and prediction grids differ in geometry")
        k = self.num_classes
        keep = (truth.data < k) & (pred.data < k)
        flat = k * truth.data[keep] + pred.data[keep]
        self.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def miou(cm: ConfusionMatrix) -> tuple[list[float], float]:
    """Per-class IoU = TP / (TP + FP + FN) and its mean.

    Classes with an empty row and column get IoU nan and are excluded from
    the mean.
    """
    tp = np.diag(cm.counts).astype(float)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    ious = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    present = denom > 0
    mean = float(np.mean(ious[present])) if present.any() else float("nan")
    return [float(v) for v in ious], mean


def cbr(class_pixel_counts) -> float:
    """Class balance rate in percent: 100 * (1 - sigma / sigma_star).

    sigma is the population std of the per-class counts; sigma_star the
    population std of the fully degenerate split (all pixels in one class).
    100% means perfectly balanced counts, 0% a single-class labelling.
    """
    counts = np.asarray(class_pixel_counts, dtype=float)
    if counts.ndim != 1 or counts.size < 2:
        raise DataError("cbr needs at least two class counts")
    if np.any(counts < 0) or counts.sum() <= 0:
        raise DataError("cbr needs non-negative counts with positive total")
    c = counts.size
    total = counts.sum()
    sigma = np.std(counts)
    degenerate = np.zeros(c)
    degenerate[0] = total
    sigma_star = np.std(degenerate)
    return float(100.0 * (1.0 - sigma / sigma_star))


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-corrected agreement between two labelings of the same items."""
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape:
        raise DataError(f"label sequences differ in length: {a.shape} vs {b.shape}")
    n = a.size
    if n == 0:
        raise DataError("cannot compare empty labelings")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_cells = comb2(table).sum()
    sum_rows = comb2(table.sum(axis=1)).sum()
    sum_cols = comb2(table.sum(axis=0)).sum()
    pairs = comb2(n)
    expected = sum_rows * sum_cols / pairs
    maximum = 0.5 * (sum_rows + sum_cols)
    if maximum == expected:
        return 1.0
    return float((sum_cells - expected) / (maximum - expected))
