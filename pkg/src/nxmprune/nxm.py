"""Group-sparsity core: the NxM constraint, its Euclidean projection, and masks.

A weight matrix satisfies the (n, m) constraint when every contiguous
group of n entries along its last axis (the input-feature / reduction
dimension of the matmul, contiguous in row-major storage) has at most m
nonzero values.  The Euclidean projection onto that set keeps the m
largest-magnitude entries of each group unchanged and writes exact 0.0
everywhere else; ties in magnitude retain the lower intra-group position
so that masks are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SparsityPattern:
    """Constraint descriptor: keep at most ``m`` of every ``n`` consecutive weights."""

    n: int = 4
    m: int = 2

    def __post_init__(self):
        if self.n < 1 or self.m < 1 or self.m > self.n:
            raise ValueError(f"invalid pattern ({self.n}, {self.m}): need 0 < m <= n")

    @property
    def keep_fraction(self) -> float:
        return self.m / self.n

    def __str__(self) -> str:
        return f"{self.n}:{self.m}"


def _grouped(w: np.ndarray, pattern: SparsityPattern) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 0 or w.shape[-1] % pattern.n != 0:
        raise ValueError(
            f"input dimension {w.shape[-1] if w.ndim else 0} of shape {w.shape} "
            f"is not divisible by group size {pattern.n}"
        )
    return w.reshape(-1, pattern.n)


def extract_mask(w: np.ndarray, pattern: SparsityPattern) -> np.ndarray:
    """Boolean mask of the positions the projection retains.

    Every group of n has exactly m set bits.  The stable sort on
    descending magnitude implements the lower-index tie-break.
    """
    groups = _grouped(w, pattern)
    order = np.argsort(-np.abs(groups), axis=1, kind="stable")
    mask = np.zeros(groups.shape, dtype=bool)
    rows = np.arange(groups.shape[0])[:, None]
    mask[rows, order[:, : pattern.m]] = True
    return mask.reshape(np.asarray(w).shape)


def project_nxm(w: np.ndarray, pattern: SparsityPattern) -> np.ndarray:
    """Euclidean projection onto the (n, m) constraint set.

    Retained entries are copied bit-for-bit; dropped entries become
    exact +0.0, so compliance checks can use exact comparisons.
    """
    w = np.asarray(w, dtype=np.float64)
    return np.where(extract_mask(w, pattern), w, 0.0)


def check_compliance(w: np.ndarray, pattern: SparsityPattern) -> bool:
    """True iff every group has at most m nonzero entries."""
    groups = _grouped(w, pattern)
    return bool((np.count_nonzero(groups, axis=1) <= pattern.m).all())
