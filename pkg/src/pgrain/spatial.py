"""Exact nearest-neighbor and radius search over point coordinates.

A bucketed kd-tree answers k-nearest-neighbor and ball queries with no
approximation.  Results are fully deterministic: neighbors are ordered by
(squared distance, point index), so equidistant points always appear in
ascending index order, and the tree agrees with the brute-force scan bit
for bit.  Squared distances are accumulated as dx*dx + dy*dy + dz*dz in
both paths so the orderings cannot diverge on ties.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .core import DomainError, Neighborhood, PointCloud

_LEAF_SIZE = 16


def _sq_dist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = points - q
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


class KdIndex:
    """Balanced 3-d kd-tree over cloud coordinates; immutable after build.

    Nodes split on the widest axis at the median; leaves hold index
    buckets.  Contains exactly the input points, duplicates included.
    Accepts a PointCloud or a bare (N, 3) coordinate array.
    """

    def __init__(self, cloud):
        if isinstance(cloud, PointCloud):
            coords = cloud.coords
        else:
            coords = np.asarray(cloud, dtype=np.float64)
            if coords.ndim != 2 or coords.shape[1] != 3:
                raise DomainError("dimension-mismatch", f"coordinates must be (N, 3), got {coords.shape}")
        if coords.shape[0] < 1:
            raise DomainError("empty-cloud", "cannot index an empty cloud")
        self.coords = coords
        self.num_points = coords.shape[0]
        self._root = self._build(np.arange(self.num_points, dtype=np.int64))

    def _build(self, indices: np.ndarray):
        pts = self.coords[indices]
        if indices.size <= _LEAF_SIZE:
            return (None, indices, pts)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        axis = int(np.argmax(hi - lo))
        if hi[axis] == lo[axis]:  # all points coincide
            return (None, indices, pts)
        mid = indices.size // 2
        order = np.argpartition(pts[:, axis], mid)
        split = float(pts[order[mid], axis])
        left = self._build(indices[order[:mid]])
        right = self._build(indices[order[mid:]])
        return (axis, split, left, right)

    # -- k nearest neighbors -------------------------------------------------

    def _knn_candidates(self, q: np.ndarray, k: int, exclude_self: bool) -> List[Tuple[float, int]]:
        # max-heap of the best (d2, idx) pairs, stored negated for heapq
        heap: List[Tuple[float, float]] = []

        def visit(node):
            if node[0] is None:
                _, indices, pts = node
                d2 = _sq_dist(pts, q)
                for j in range(indices.size):
                    dist2 = d2[j]
                    if exclude_self and dist2 == 0.0:
                        continue
                    item = (-dist2, -int(indices[j]))
                    if len(heap) < k:
                        heapq.heappush(heap, item)
                    elif item > heap[0]:
                        heapq.heapreplace(heap, item)
                return
            axis, split, left, right = node
            delta = q[axis] - split
            near, far = (left, right) if delta < 0 else (right, left)
            visit(near)
            # prune only when strictly worse: an equidistant point can still
            # win the tie on index
            if len(heap) < k or delta * delta <= -heap[0][0]:
                visit(far)

        visit(self._root)
        return sorted((-nd2, -nidx) for nd2, nidx in heap)

    # -- radius search -------------------------------------------------------

    def _radius_candidates(self, q: np.ndarray, r2: float) -> List[Tuple[float, int]]:
        out: List[Tuple[float, int]] = []

        def visit(node):
            if node[0] is None:
                _, indices, pts = node
                d2 = _sq_dist(pts, q)
                inside = d2 <= r2
                for j in np.flatnonzero(inside):
                    out.append((d2[j], int(indices[j])))
                return
            axis, split, left, right = node
            delta = q[axis] - split
            near, far = (left, right) if delta < 0 else (right, left)
            visit(near)
            if delta * delta <= r2:
                visit(far)

        visit(self._root)
        out.sort()
        return out


@dataclass(frozen=True)
class BallQueryResult:
    """Outcome of a ball query.

    ``neighborhood`` is None for the empty-region outcome.  When fewer than
    K_max points fall inside the radius, the nearest one is repeated to pad
    the neighborhood and ``padded`` is set.
    """

    neighborhood: Optional[Neighborhood]
    padded: bool
    num_in_radius: int

    @property
    def empty(self) -> bool:
        return self.neighborhood is None


def build_index(cloud: PointCloud) -> KdIndex:
    """Build an exact kd-tree index over the cloud's coordinates."""
    return KdIndex(cloud)


def _as_query(query_coord) -> np.ndarray:
    q = np.asarray(query_coord, dtype=np.float64).reshape(-1)
    if q.shape != (3,):
        raise DomainError("dimension-mismatch", f"query coordinate must be a 3-vector, got shape {q.shape}")
    if not np.isfinite(q).all():
        raise DomainError("non-finite-value", "query coordinate contains a non-finite entry")
    return q


def _neighborhood(pairs: List[Tuple[float, int]], center_index: Optional[int]) -> Neighborhood:
    idx = np.array([p[1] for p in pairs], dtype=np.int64)
    dist = np.sqrt(np.array([p[0] for p in pairs], dtype=np.float64))
    # order on the reported distances: sqrt can collapse adjacent squared
    # distances onto one double, and ties must come out by ascending index
    order = np.lexsort((idx, dist))
    return Neighborhood(center_index=center_index, neighbor_indices=idx[order], distances=dist[order])


def knn_query(index: KdIndex, query_coord, k: int, exclude_self: bool = False,
              center_index: Optional[int] = None) -> Neighborhood:
    """The k exactly-nearest points, ascending distance, ties by index.

    When the query coordinate coincides with a cloud point, that point is
    returned first at distance zero unless ``exclude_self`` is set, which
    drops every zero-distance match.
    """
    q = _as_query(query_coord)
    n = index.num_points
    if not 1 <= k <= n:
        raise DomainError("k-out-of-range", f"k={k} outside [1, {n}]")
    pairs = index._knn_candidates(q, k, exclude_self)
    if len(pairs) < k:
        raise DomainError("k-out-of-range", f"only {len(pairs)} points remain after self-exclusion, need {k}")
    return _neighborhood(pairs, center_index)


def ball_query(index: KdIndex, query_coord, radius: float, k_max: int,
               center_index: Optional[int] = None) -> BallQueryResult:
    """Up to k_max points with distance <= radius, nearest first.

    Follows the set-abstraction padding convention: an under-full region
    repeats its nearest point up to k_max; a region with no points at all
    is a normal empty outcome, not an error.
    """
    q = _as_query(query_coord)
    if not radius > 0:
        raise DomainError("invalid-spec", f"radius must be > 0, got {radius}")
    if k_max < 1:
        raise DomainError("k-out-of-range", f"k_max must be >= 1, got {k_max}")
    pairs = index._radius_candidates(q, radius * radius)
    if not pairs:
        return BallQueryResult(neighborhood=None, padded=False, num_in_radius=0)
    found = len(pairs)
    if found >= k_max:
        pairs = pairs[:k_max]
        padded = False
    else:
        pairs = sorted(pairs + [pairs[0]] * (k_max - found))
        padded = True
    return BallQueryResult(
        neighborhood=_neighborhood(pairs, center_index),
        padded=padded,
        num_in_radius=found,
    )


def brute_force_knn(cloud: PointCloud, query_coord, k: int, exclude_self: bool = False,
                    center_index: Optional[int] = None) -> Neighborhood:
    """O(N) scan oracle; definitionally correct under the same tie rule."""
    q = _as_query(query_coord)
    n = cloud.num_points
    if not 1 <= k <= n:
        raise DomainError("k-out-of-range", f"k={k} outside [1, {n}]")
    d2 = _sq_dist(cloud.coords, q)
    order = np.lexsort((np.arange(n), d2))
    if exclude_self:
        order = order[d2[order] != 0.0]
    if order.size < k:
        raise DomainError("k-out-of-range", f"only {order.size} points remain after self-exclusion, need {k}")
    chosen = order[:k]
    return _neighborhood([(d2[i], int(i)) for i in chosen], center_index)
