"""Labelled toy datasets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ValueError("X must be (n, d) with one label per row")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.n_classes)

    def split(self, holdout: float, rng: np.random.Generator) -> tuple["Dataset", "Dataset"]:
        order = rng.permutation(len(self))
        cut = len(self) - int(round(holdout * len(self)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None
                ) -> Iterator["Dataset"]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for lo in range(0, len(self), batch_size):
            yield self.subset(order[lo:lo + batch_size])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)


def make_blobs(n_per_class: int, n_classes: int = 4, dim: int = 8, separation: float = 5.0,
               rng: np.random.Generator | None = None) -> Dataset:
    """Isotropic unit-variance Gaussian blobs.

    Class means sit at ``separation * e_k`` for k < dim (then wrap with a sign
    flip), so any two means are at least ``separation`` apart and every pair is
    linearly separable in the limit of large separation.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if n_classes > 2 * dim:
        raise ValueError("at most 2*dim well-separated classes")
    means = np.zeros((n_classes, dim))
    for k in range(n_classes):
        means[k, k % dim] = separation if k < dim else -separation
    X = np.concatenate([means[k] + rng.standard_normal((n_per_class, dim)) for k in range(n_classes)])
    y = np.repeat(np.arange(n_classes), n_per_class)
    order = rng.permutation(len(y))
    return Dataset(X[order], y[order], n_classes)
