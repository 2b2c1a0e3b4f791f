"""Dominance filtering, 2-D hypervolume and front coverage.

All functions use the maximization convention: larger is better in every
coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ContractError


def nondominated(points) -> np.ndarray:
    """Indices-stable nondominated subset of ``points`` ``(n, d)``.

    A point is dropped if another point is >= in every coordinate and > in
    at least one. Exact duplicates are kept once (first occurrence).
    """
    p = np.asarray(points, dtype=float)
    if p.size == 0:
        return p.reshape(0, p.shape[1] if p.ndim == 2 else 0)
    if p.ndim != 2:
        raise ContractError("points must be a 2-D array (n, d)")
    if p.shape[1] == 2 and np.all(np.isfinite(p)):
        return p[_nondominated_2d(p)]
    keep = np.ones(len(p), dtype=bool)
    for i in range(len(p)):
        ge = np.all(p >= p[i], axis=1)
        gt = np.any(p > p[i], axis=1)
        if np.any(ge & gt):
            keep[i] = False
            continue
        # Duplicate of an earlier kept point.
        same = np.all(p[:i] == p[i], axis=1) & keep[:i]
        if np.any(same):
            keep[i] = False
    return p[keep]


def _nondominated_2d(p: np.ndarray) -> np.ndarray:
    """Sorted original indices of the nondominated first occurrences, O(n log n)."""
    _, first = np.unique(p, axis=0, return_index=True)
    u = p[first]
    # x descending, then y descending: every earlier point has x >= x_i and
    # is distinct, so it dominates i exactly when its y >= y_i.
    order = np.lexsort((-u[:, 1], -u[:, 0]))
    y = u[order, 1]
    prev_max = np.maximum.accumulate(np.r_[-np.inf, y[:-1]])
    return np.sort(first[order[y > prev_max]])


def hypervolume_2d(front, reference) -> float:
    """Area dominated by ``front`` and bounded below by ``reference``."""
    ref = np.asarray(reference, dtype=float)
    p = np.asarray(front, dtype=float).reshape(-1, 2)
    if ref.shape != (2,):
        raise ContractError("hypervolume_2d needs a 2-D reference point")
    if len(p) == 0:
        return 0.0
    nd = nondominated(p)
    if np.any(nd < ref):
        raise ContractError("every nondominated point must be >= the reference point")
    nd = nd[np.argsort(-nd[:, 0], kind="stable")]
    area, prev_y = 0.0, ref[1]
    for x, y in nd:
        area += (x - ref[0]) * (y - prev_y)
        prev_y = y
    return float(area)


def front_coverage(front, true_front, threshold: float) -> float:
    """Fraction of ``true_front`` points within ``threshold`` of some front point."""
    f = np.asarray(front, dtype=float)
    t = np.asarray(true_front, dtype=float)
    if f.size == 0 or t.size == 0:
        return 0.0
    d = np.sqrt(((t[:, None, :] - f[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
    return float(np.mean(d <= threshold))


@dataclass(frozen=True)
class FrontPoint:
    tradeoff: tuple[float, ...]
    rewards: tuple[float, ...]
    metadata: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True, eq=False)
class ParetoFront:
    """Outcome points of a sweep plus the hypervolume reference point."""

    points: tuple[FrontPoint, ...]
    reference: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        object.__setattr__(self, "reference", tuple(float(x) for x in self.reference))

    def rewards(self) -> np.ndarray:
        return np.array([p.rewards for p in self.points], dtype=float).reshape(len(self.points), -1)

    def nondominated(self) -> np.ndarray:
        return nondominated(self.rewards())

    def hypervolume(self) -> float:
        """Hypervolume of the points at or above the reference."""
        r = self.rewards()
        r = r[np.all(r >= np.asarray(self.reference), axis=1)] if len(r) else r
        return hypervolume_2d(r, self.reference)

    def coverage(self, true_front, threshold: float) -> float:
        return front_coverage(self.rewards(), true_front, threshold)
