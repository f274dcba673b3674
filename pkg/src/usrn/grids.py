"""Per-pixel grid containers: features, probabilities, and (pseudo-)labels.

All grids are dense numpy arrays in row-major (H, W, ...) layout. Label grids
reserve the index K (== number of classes) as the IGNORE value: IGNORE pixels
contribute neither loss nor gradient anywhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

PROB_TOL = 1e-6


@dataclass
class FeatureGrid:
    """H x W grid of D-dimensional feature vectors (the "image")."""

    data: np.ndarray  # (H, W, D) float64

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DataError(f"feature grid must be (H, W, D) with positive dims, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("feature grid contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass
class ProbGrid:
    """H x W grid of K-dimensional probability vectors."""

    data: np.ndarray  # (H, W, K) float64

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DataError(f"probability grid must be (H, W, K), got {self.data.shape}")
        if np.any(self.data < -PROB_TOL) or not np.all(np.isfinite(self.data)):
            raise DataError("probability grid has negative or non-finite entries")
        sums = self.data.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > PROB_TOL):
            worst = float(np.max(np.abs(sums - 1.0)))
            raise DataError(f"probability vectors must sum to 1 within {PROB_TOL}, worst deviation {worst:.3g}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def classes(self) -> int:
        return self.data.shape[2]


@dataclass
class LabelGrid:
    """H x W grid of integer class indices in [0, K), with K reserved for IGNORE."""

    data: np.ndarray  # (H, W) int64
    num_classes: int

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.int64)
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise DataError(f"label grid must be (H, W), got {self.data.shape}")
        if self.num_classes < 1:
            raise DataError("label grid needs at least one class")
        if np.any(self.data < 0) or np.any(self.data > self.num_classes):
            raise DataError(f"label indices must lie in [0, {self.num_classes}] (K==IGNORE)")

    @property
    def ignore_index(self) -> int:
        return self.num_classes

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def valid_mask(self) -> np.ndarray:
        """Boolean mask of non-IGNORE pixels."""
        return self.data < self.num_classes

    def coverage(self) -> float:
        """Fraction of pixels carrying a real label."""
        return float(np.mean(self.valid_mask()))


def all_ignore(num_classes: int, height: int, width: int) -> LabelGrid:
    """Label grid with every pixel set to IGNORE."""
    return LabelGrid(np.full((height, width), num_classes, dtype=np.int64), num_classes)
