"""Anchor prior estimation: k-means over box shapes with 1 - IoU distance.

Boxes are compared concentrically (centers aligned), so only width and height
matter.  Initialization is k-means++ over the deduplicated, sorted shape set
with a fixed seed, which makes the result independent of the input list
order.  Centroids update by the arithmetic mean of assigned (w, h); since the
mean is only a heuristic under IoU distance, iteration stops early rather
than ever letting the objective rise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .detector import ANCHORS_PER_SCALE, AnchorSet

__all__ = [
    "BoxShape",
    "shape_iou",
    "kmeans_anchors",
    "assign_to_scales",
    "prior_utilization",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BoxShape:
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box shape extents must be positive, got ({self.w}, {self.h})")

    @property
    def area(self) -> float:
        return self.w * self.h


def shape_iou(a: BoxShape, b: BoxShape) -> float:
    """IoU of two boxes placed concentrically."""
    inter = min(a.w, b.w) * min(a.h, b.h)
    return inter / (a.w * a.h + b.w * b.h - inter)


def _dist_matrix(shapes: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """1 - IoU between every shape (N, 2) and centroid (K, 2), shape (N, K)."""
    iw = np.minimum(shapes[:, None, 0], centroids[None, :, 0])
    ih = np.minimum(shapes[:, None, 1], centroids[None, :, 1])
    inter = iw * ih
    union = (shapes[:, 0] * shapes[:, 1])[:, None] \
        + (centroids[:, 0] * centroids[:, 1])[None, :] - inter
    return 1.0 - inter / union


def _plusplus_init(unique: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding over the distinct shapes."""
    n = unique.shape[0]
    centroids = np.empty((k, 2))
    centroids[0] = unique[rng.integers(n)]
    d2 = _dist_matrix(unique, centroids[:1]).min(axis=1) ** 2
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = unique[rng.integers(n)]
        else:
            centroids[i] = unique[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, _dist_matrix(unique, centroids[i:i + 1]).min(axis=1) ** 2)
    return centroids


def _lloyd_run(pts: np.ndarray, k: int, centroids: np.ndarray, max_iters: int
               ) -> tuple[np.ndarray, float, list[float]]:
    """One Lloyd run.  Stops when the assignment stabilizes (returning the
    converged means) or when a mean update raises the assignment objective,
    in which case the pre-update centroids come back.  The recorded
    per-iteration objective is therefore non-increasing by construction.
    """
    assign = None
    trace: list[float] = []
    prev_obj = np.inf
    prev_centroids = centroids.copy()
    for _ in range(max_iters):
        dist = _dist_matrix(pts, centroids)
        new_assign = dist.argmin(axis=1)

        # re-seed empty clusters at the worst-served point; this only ever
        # lowers min-distances, so it cannot break monotonicity
        for c in range(k):
            if not np.any(new_assign == c):
                centroids[c] = pts[dist.min(axis=1).argmax()]
                log.debug("kmeans: cluster %d empty, re-seeded from farthest point", c)
                dist = _dist_matrix(pts, centroids)
                new_assign = dist.argmin(axis=1)

        if assign is not None and np.array_equal(new_assign, assign):
            break  # stable assignment: centroids are its means, done
        obj = float(dist[np.arange(len(pts)), new_assign].sum())
        if obj > prev_obj:
            centroids = prev_centroids  # the IoU-mean heuristic backfired
            break
        assign = new_assign
        trace.append(obj)
        prev_obj = obj
        prev_centroids = centroids.copy()
        centroids = np.array([pts[assign == c].mean(axis=0) for c in range(k)])

    final_obj = float(_dist_matrix(pts, centroids).min(axis=1).sum())
    return centroids, final_obj, trace


def kmeans_anchors(shapes: Sequence[BoxShape], k: int, seed: int = 0,
                   max_iters: int = 100, restarts: int = 4,
                   objective_trace: list | None = None) -> list[BoxShape]:
    """Best of several Lloyd runs under 1 - IoU distance; k centroids sorted
    by area.

    Deterministic for a given seed, and independent of the input list order
    (initialization draws from the deduplicated, sorted shape set).  Each run
    keeps its iteration objective non-increasing (see ``_lloyd_run``); the
    run with the lowest final within-cluster distance wins, which makes a
    rare bad seeding harmless.  Pass a list as ``objective_trace`` to capture
    the winning run's objective per iteration.
    """
    if not shapes:
        raise ValueError("kmeans_anchors requires at least one shape")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    pts = np.array([(s.w, s.h) for s in shapes], dtype=np.float64)
    unique = np.unique(pts, axis=0)  # sorted lexicographically: order-independent init
    if k > unique.shape[0]:
        raise ValueError(
            f"k={k} exceeds the {unique.shape[0]} distinct shapes available"
        )

    rng = np.random.default_rng(seed)
    best: tuple[float, np.ndarray, list[float]] | None = None
    for _ in range(restarts):
        init = _plusplus_init(unique, k, rng)
        centroids, final_obj, trace = _lloyd_run(pts, k, init, max_iters)
        if best is None or final_obj < best[0]:
            best = (final_obj, centroids, trace)

    if objective_trace is not None:
        objective_trace.extend(best[2])
    final = best[1]
    order = np.lexsort((final[:, 0], final[:, 1], final[:, 0] * final[:, 1]))
    return [BoxShape(float(w), float(h)) for w, h in final[order]]


def assign_to_scales(centroids: Sequence[BoxShape]) -> AnchorSet:
    """Split nine priors across the three scales by area rank: the smallest
    three go to the finest grid, the largest three to the coarsest."""
    if len(centroids) != 3 * ANCHORS_PER_SCALE:
        raise ValueError(f"assign_to_scales requires 9 centroids, got {len(centroids)}")
    ranked = sorted(centroids, key=lambda s: s.area)  # stable: equal areas keep input order
    groups = [ranked[0:3], ranked[3:6], ranked[6:9]]
    return AnchorSet(tuple(tuple((s.w, s.h) for s in g) for g in groups))


def prior_utilization(shapes: Sequence[BoxShape], anchors: AnchorSet) -> list[int]:
    """How many ground-truth shapes each of the nine priors would claim
    (best shape-IoU wins).  Flat order matches AnchorSet.flat()."""
    priors = [BoxShape(w, h) for w, h in anchors.flat()]
    counts = [0] * len(priors)
    for s in shapes:
        best = max(range(len(priors)), key=lambda i: shape_iou(s, priors[i]))
        counts[best] += 1
    return counts
