"""Window normalization of local feature neighborhoods.

A window is one center feature plus its K neighbor features (rows in
ascending-distance order).  Normalization subtracts the CENTER feature —
prior knowledge standing in for the window mean — and divides by a single
scalar sigma plus epsilon:

    sigma = sqrt( sum_j ||x_j - x_center||^2 / (K*d - 1) )

summed over all K rows and all d channels.  Sigma is deliberately one
scalar per window, not per channel: the K*d - 1 denominator counts every
entry of the window.  The group-wise variant splits the rows at m (the m
nearest rows form the texture group) and normalizes each group with its
own sigma.  No learnable parameters anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from . import util
from .core import DomainError, PointCloud, WindowStats
from .spatial import build_index, knn_query

DEFAULT_EPSILON = 1e-5
DEFAULT_SPLIT = 3  # grouping size with the best reported ablation accuracy


@dataclass(frozen=True, eq=False)
class Window:
    """One center feature and its K neighbor features, all finite.

    ``d`` is the working dimension: the raw feature dimension n, or n+3
    when coordinates are concatenated in front of the features.
    """

    center_feature: np.ndarray  # (d,)
    neighbor_features: np.ndarray  # (K, d)

    def __post_init__(self):
        center = np.asarray(self.center_feature, dtype=np.float64).reshape(-1)
        rows = np.asarray(self.neighbor_features, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != center.shape[0]:
            raise DomainError(
                "shape-mismatch",
                f"neighbors {rows.shape} incompatible with center of dimension {center.shape[0]}",
            )
        if center.shape[0] < 1 or rows.shape[0] < 1:
            raise DomainError("degenerate-window", "windows need K >= 1 and d >= 1")
        if not (np.isfinite(center).all() and np.isfinite(rows).all()):
            raise DomainError("non-finite-value", "window entries must be finite")
        object.__setattr__(self, "center_feature", center)
        object.__setattr__(self, "neighbor_features", rows)

    @property
    def k(self) -> int:
        return self.neighbor_features.shape[0]

    @property
    def d(self) -> int:
        return self.neighbor_features.shape[1]


@dataclass(frozen=True, eq=False)
class NormalizedWindow:
    """Normalized window rows plus the statistics that produced them."""

    values: np.ndarray  # (K, d)
    stats: Union[WindowStats, Tuple[WindowStats, WindowStats]]


def _sigma_from_deviations(dev: np.ndarray) -> float:
    count = dev.size
    if count < 2:
        raise DomainError("degenerate-window", f"sigma needs K*d >= 2 entries, got {count}")
    return float(np.sqrt(np.sum(dev * dev) / (count - 1)))


def window_sigma(window: Window) -> float:
    """Scalar standard deviation of the window around its center feature."""
    return _sigma_from_deviations(window.neighbor_features - window.center_feature)


def window_normalize(window: Window, epsilon: float = DEFAULT_EPSILON) -> NormalizedWindow:
    """Normalize every row: (x_j - x_center) / (sigma + epsilon)."""
    if not epsilon > 0:
        raise DomainError("invalid-spec", f"epsilon must be > 0, got {epsilon}")
    dev = window.neighbor_features - window.center_feature
    sigma = _sigma_from_deviations(dev)
    return NormalizedWindow(values=dev / (sigma + epsilon), stats=WindowStats(sigma, epsilon))


def calibrate(normalized: NormalizedWindow, center_feature: np.ndarray) -> np.ndarray:
    """Rectified rows: x* = x_hat + x_center.

    Algebraically x* = lam * x + (1 - lam) * x_center with
    lam = 1 / (sigma + epsilon), which is what makes the rectified window's
    sample mean and variance shrink toward the center by lam and lam^2.
    """
    center = np.asarray(center_feature, dtype=np.float64).reshape(-1)
    if center.shape[0] != normalized.values.shape[1]:
        raise DomainError(
            "shape-mismatch",
            f"center of dimension {center.shape[0]} against values {normalized.values.shape}",
        )
    return normalized.values + center


def group_wise_window_normalize(window: Window, m: int = DEFAULT_SPLIT,
                                epsilon: float = DEFAULT_EPSILON) -> NormalizedWindow:
    """Normalize the m nearest rows and the K-m remaining rows separately.

    Rows must already be in ascending-distance order (Neighborhood order):
    the first m rows are the texture group, the rest the spatial group.
    Each group gets its own sigma with denominator (count*d - 1).
    """
    if not epsilon > 0:
        raise DomainError("invalid-spec", f"epsilon must be > 0, got {epsilon}")
    k = window.k
    if not 1 <= m < k:
        raise DomainError("bad-split", f"m={m} outside [1, {k - 1}]")
    out = np.empty_like(window.neighbor_features)
    stats = []
    for rows in (slice(0, m), slice(m, k)):
        dev = window.neighbor_features[rows] - window.center_feature
        if dev.size < 2:
            raise DomainError("degenerate-group", f"group of {dev.shape[0]} rows x {window.d} channels has fewer than 2 entries")
        sigma = _sigma_from_deviations(dev)
        out[rows] = dev / (sigma + epsilon)
        stats.append(WindowStats(sigma, epsilon, m=m))
    return NormalizedWindow(values=out, stats=(stats[0], stats[1]))


def batch_window_sigma(neighbors: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Sigma for a batch of windows: neighbors (B, K, d) against centers (B, d)."""
    b, k, d = neighbors.shape
    if k * d < 2:
        raise DomainError("degenerate-window", f"sigma needs K*d >= 2 entries, got {k * d}")
    dev = neighbors - centers[:, None, :]
    return np.sqrt(np.sum(dev * dev, axis=(1, 2)) / (k * d - 1))


def sigma_map(cloud: PointCloud, k: int, threshold: float = 1.0,
              use_coords: bool = True, exclude_self: bool = False) -> np.ndarray:
    """Indices of centers whose window sigma exceeds the threshold.

    Windows are built at every cloud point from its k nearest neighbors
    over the concatenated [coordinate, feature] vectors (d = n+3), matching
    how boundary points light up in real scenes; set ``use_coords`` False
    to restrict windows to raw features.
    """
    n_pts = cloud.num_points
    if not 1 <= k <= n_pts:
        raise DomainError("k-out-of-range", f"k={k} outside [1, {n_pts}]")
    matrix = np.hstack([cloud.coords, cloud.features]) if use_coords else cloud.features
    if k * matrix.shape[1] < 2:
        raise DomainError("degenerate-window", "windows would have fewer than 2 entries")
    index = build_index(cloud)

    def run_chunk(centers) -> np.ndarray:
        gathered = np.empty((len(centers), k, matrix.shape[1]))
        for row, i in enumerate(centers):
            hood = knn_query(index, cloud.coords[i], k, exclude_self=exclude_self, center_index=int(i))
            gathered[row] = matrix[hood.neighbor_indices]
        return batch_window_sigma(gathered, matrix[list(centers)])

    sigmas = np.concatenate(util.map_chunks(run_chunk, range(n_pts)))
    return np.flatnonzero(sigmas > threshold).astype(np.int64)
