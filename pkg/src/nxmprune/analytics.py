"""Run diagnostics: mask similarity and magnitude decay by mask presence.

Similarity between consecutive sparse masks measures how quickly the
optimization settles on a support; magnitude decay bucketed by how often
a parameter appeared in the mask shows how leaving the mask erodes
pretrained information.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def mask_similarity(prev: np.ndarray, nxt: np.ndarray) -> float:
    """Fraction of previously retained positions still retained.

    Because both masks keep the same number of positions, the measure is
    symmetric in its arguments.  Always in [0, 1]; exactly 1 iff the
    masks are identical.
    """
    prev = np.asarray(prev, dtype=bool)
    nxt = np.asarray(nxt, dtype=bool)
    if prev.shape != nxt.shape:
        raise ValueError(f"mask shapes differ: {prev.shape} vs {nxt.shape}")
    kept = int(prev.sum())
    if kept == 0:
        return 1.0
    return int((prev & nxt).sum()) / kept


def mean_mask_similarity(prev: dict[str, np.ndarray], nxt: dict[str, np.ndarray]) -> float:
    """Unweighted mean of per-layer similarities."""
    if set(prev) != set(nxt):
        raise ValueError("mask dicts cover different layers")
    return float(np.mean([mask_similarity(prev[name], nxt[name]) for name in sorted(prev)]))


@dataclass
class PresenceHistogram:
    """Mean final/initial magnitude ratio, grouped by mask presence count."""

    total_iterations: int
    floor: float
    bucket_counts: dict[int, int]
    bucket_mean_ratio: dict[int, float]

    @property
    def population(self) -> int:
        return sum(self.bucket_counts.values())

    def coarse(self, bins: int = 5) -> list[tuple[int, int, int, float]]:
        """(lo, hi, population, mean ratio) rows over equal presence-count ranges,
        with the always-present bucket kept separate as (K, K, ...)."""
        k = self.total_iterations
        rows = []
        edges = np.linspace(0, k, bins + 1)
        for i in range(bins):
            lo, hi = int(np.floor(edges[i])), int(np.ceil(edges[i + 1])) - 1
            if i == bins - 1:
                hi = k - 1
            counts = [c for c in self.bucket_counts if lo <= c <= hi]
            pop = sum(self.bucket_counts[c] for c in counts)
            if pop:
                mean = sum(self.bucket_mean_ratio[c] * self.bucket_counts[c] for c in counts) / pop
                rows.append((lo, hi, pop, mean))
        if k in self.bucket_counts:
            rows.append((k, k, self.bucket_counts[k], self.bucket_mean_ratio[k]))
        return rows

    def to_rows(self) -> list[tuple[int, int, float]]:
        return [(c, self.bucket_counts[c], self.bucket_mean_ratio[c]) for c in sorted(self.bucket_counts)]


def presence_counts(mask_history: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Per layer, how many recorded masks retained each position."""
    if not mask_history:
        raise ValueError("empty mask history")
    names = sorted(mask_history[0])
    counts = {name: np.zeros(mask_history[0][name].shape, dtype=np.int64) for name in names}
    for record in mask_history:
        if sorted(record) != names:
            raise ValueError("mask history records cover different layers")
        for name in names:
            if record[name].shape != counts[name].shape:
                raise ValueError(f"mask shape changed across history for {name}")
            counts[name] += record[name]
    return counts


def decay_report(
    initial: dict[str, np.ndarray],
    final: dict[str, np.ndarray],
    mask_history: list[dict[str, np.ndarray]],
    *,
    floor: float = 1e-8,
    expected_iterations: int | None = None,
) -> PresenceHistogram:
    """Bucket |w_final| / |w_initial| by mask presence count.

    Only parameters carried by the mask history (the constrained set) are
    considered, and those with |w_initial| below the floor are dropped to
    avoid meaningless ratios at the float noise level.
    """
    k = len(mask_history)
    if expected_iterations is not None and k != expected_iterations:
        raise ValueError(f"mask history length {k} != expected {expected_iterations}")
    counts = presence_counts(mask_history)
    sums: dict[int, float] = {}
    pops: dict[int, int] = {}
    for name, count in counts.items():
        if name not in initial or name not in final:
            raise ValueError(f"mask history names tensor {name!r} missing from parameters")
        w0 = np.abs(np.asarray(initial[name], dtype=np.float64)).ravel()
        w1 = np.abs(np.asarray(final[name], dtype=np.float64)).ravel()
        if w0.shape != w1.shape or w0.size != count.size:
            raise ValueError(f"shape mismatch for {name}")
        keep = w0 >= floor
        ratio = w1[keep] / w0[keep]
        for c, r in zip(count.ravel()[keep], ratio):
            c = int(c)
            sums[c] = sums.get(c, 0.0) + float(r)
            pops[c] = pops.get(c, 0) + 1
    means = {c: sums[c] / pops[c] for c in pops}
    return PresenceHistogram(total_iterations=k, floor=floor, bucket_counts=pops, bucket_mean_ratio=means)
