"""The pre-abstraction group-wise window-normalization aggregation block.

One block turns a center point plus its K nearest neighbors into a single
2n-dimensional feature:

    rows = LB1( GWN([c_j || x_j] rows, center [c || x], split m) )   (K x n)
    rows = LB2( [rows || x_center] )                                 (K x 2n)
    out  = ReLU( channel-wise max over the K rows )                  (2n,)

LB is a linear layer followed by batch norm, with no activation inside.
Batch norm treats every (center, neighbor) row in the call as its batch,
so a batched forward over M centers normalizes across all M*K rows.  The
backward pass is fully analytic, including the sigma path of the GWN,
the batch-statistics path of batch norm, and argmax routing of the pool
(ties to the lowest row index).

Baseline aggregators (plain MLP + max pool over KNN or ball-query
neighborhoods) live here too, sharing the layer primitives.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import BatchNormState, DomainError, PagwnParams, PointCloud
from .spatial import KdIndex, ball_query, build_index, knn_query

DEFAULT_EPSILON = 1e-5
DEFAULT_SPLIT = 3


# ---------------------------------------------------------------------------
# Layer primitives (forward caches + analytic backward)
# ---------------------------------------------------------------------------

def _bn_forward(x: np.ndarray, bn: BatchNormState):
    """Returns (y, cache).  Training mode normalizes with batch statistics."""
    if bn.mode == "training":
        if x.shape[0] < 2:
            raise DomainError("degenerate-window", "training-mode batch norm needs at least 2 rows")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + bn.eps)
        x_hat = (x - mean) * inv_std
        return bn.gamma * x_hat + bn.beta, ("training", x_hat, inv_std, mean, var)
    inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
    x_hat = (x - bn.running_mean) * inv_std
    return bn.gamma * x_hat + bn.beta, ("inference", x_hat, inv_std, None, None)


def _bn_backward(g: np.ndarray, bn: BatchNormState, cache):
    mode, x_hat, inv_std, _, _ = cache
    dgamma = (g * x_hat).sum(axis=0)
    dbeta = g.sum(axis=0)
    dxhat = g * bn.gamma
    if mode != "training":
        raise DomainError("stale-cache", "backward requires a training-mode forward cache")
    dx = inv_std * (dxhat - dxhat.mean(axis=0) - x_hat * (dxhat * x_hat).mean(axis=0))
    return dx, dgamma, dbeta


def _gwn_forward(windows: np.ndarray, centers: np.ndarray, m: int, epsilon: float):
    """Group-wise window normalization over a batch.

    windows: (M, K, D) absolute rows; centers: (M, D).  Rows must be in
    ascending-distance order.  K == 1 degrades to an ungrouped window (the
    split needs one row on each side).
    """
    _, k, d = windows.shape
    dev = windows - centers[:, None, :]
    groups = [(slice(0, k), k * d - 1)] if k == 1 else \
        [(slice(0, m), m * d - 1), (slice(m, k), (k - m) * d - 1)]
    if k > 1 and not 1 <= m < k:
        raise DomainError("bad-split", f"m={m} outside [1, {k - 1}]")
    out = np.empty_like(dev)
    sigmas = []
    for rows, denom in groups:
        if denom < 1:
            raise DomainError("degenerate-group", "a group must hold at least 2 entries")
        part = dev[:, rows]
        sig = np.sqrt(np.sum(part * part, axis=(1, 2)) / denom)
        out[:, rows] = part / (sig + epsilon)[:, None, None]
        sigmas.append(sig)
    return out, (dev, sigmas, groups, epsilon)


def _gwn_backward(g: np.ndarray, cache):
    dev, sigmas, groups, epsilon = cache
    ddev = np.empty_like(dev)
    for (rows, denom), sig in zip(groups, sigmas):
        scale = sig + epsilon
        part_dev = dev[:, rows]
        part_g = g[:, rows]
        direct = part_g / scale[:, None, None]
        # sigma path: d(sigma)/d(dev_jc) = dev_jc / (denom * sigma)
        dl_dsig = -np.sum(part_g * part_dev, axis=(1, 2)) / (scale * scale)
        coef = np.divide(dl_dsig, denom * sig, out=np.zeros_like(sig), where=sig > 0)
        ddev[:, rows] = direct + coef[:, None, None] * part_dev
    return ddev, -ddev.sum(axis=1)


def _linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return x @ weight + bias


def _linear_backward(g: np.ndarray, x: np.ndarray, weight: np.ndarray):
    return g @ weight.T, x.T @ g, g.sum(axis=0)


# ---------------------------------------------------------------------------
# PAGWN types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PagwnInput:
    """One center and its K neighbors, rows in ascending-distance order."""

    center_coord: np.ndarray      # (3,)
    center_feature: np.ndarray    # (n,)
    neighbor_coords: np.ndarray   # (K, 3)
    neighbor_features: np.ndarray  # (K, n)

    def __post_init__(self):
        cc = np.asarray(self.center_coord, dtype=np.float64).reshape(-1)
        cf = np.asarray(self.center_feature, dtype=np.float64).reshape(-1)
        nc = np.asarray(self.neighbor_coords, dtype=np.float64)
        nf = np.asarray(self.neighbor_features, dtype=np.float64)
        if cc.shape != (3,) or nc.ndim != 2 or nc.shape[1] != 3:
            raise DomainError("shape-mismatch", "coordinates must be 3-vectors")
        if nf.ndim != 2 or nf.shape[0] != nc.shape[0] or nf.shape[1] != cf.shape[0]:
            raise DomainError(
                "shape-mismatch",
                f"neighbor features {nf.shape} inconsistent with coords {nc.shape} and center feature {cf.shape}",
            )
        if nc.shape[0] < 1:
            raise DomainError("degenerate-window", "need at least one neighbor")
        for name, arr in (("center_coord", cc), ("center_feature", cf),
                          ("neighbor_coords", nc), ("neighbor_features", nf)):
            if not np.isfinite(arr).all():
                raise DomainError("non-finite-value", f"{name} contains a non-finite entry")
        object.__setattr__(self, "center_coord", cc)
        object.__setattr__(self, "center_feature", cf)
        object.__setattr__(self, "neighbor_coords", nc)
        object.__setattr__(self, "neighbor_features", nf)

    @property
    def k(self) -> int:
        return self.neighbor_coords.shape[0]

    @property
    def n(self) -> int:
        return self.center_feature.shape[0]


@dataclass(eq=False)
class PagwnCache:
    """Everything the analytic backward needs; holds references, not copies."""

    params: PagwnParams
    mode: str
    single_input: bool
    shapes: Tuple[int, int, int]  # (M, K, n)
    gwn_rows: np.ndarray          # (M*K, n+3) GWN output, LB1 input
    gwn_cache: tuple
    bn1_cache: tuple
    h_rows: np.ndarray            # (M*K, 2n) LB2 input
    bn2_cache: tuple
    pooled: np.ndarray            # (M, 2n) pre-ReLU pooled values
    argmax: np.ndarray            # (M, 2n) winning row per channel


@dataclass(frozen=True, eq=False)
class PagwnOutput:
    """Aggregated features plus the cache retained for backward.

    ``updated_lb1_bn``/``updated_lb2_bn`` carry running statistics folded
    with this batch (training mode only); apply them with
    :func:`with_updated_bn` before the next inference pass.
    """

    aggregated: np.ndarray
    cache: PagwnCache
    updated_lb1_bn: Optional[BatchNormState] = None
    updated_lb2_bn: Optional[BatchNormState] = None

    def __post_init__(self):
        if not np.isfinite(self.aggregated).all():
            raise DomainError("non-finite-value", "aggregated output contains a non-finite entry")


@dataclass(eq=False)
class PagwnGradients:
    lb1_weight: np.ndarray
    lb1_bias: np.ndarray
    lb1_gamma: np.ndarray
    lb1_beta: np.ndarray
    lb2_weight: np.ndarray
    lb2_bias: np.ndarray
    lb2_gamma: np.ndarray
    lb2_beta: np.ndarray
    neighbor_coords: np.ndarray
    neighbor_features: np.ndarray
    center_coord: np.ndarray
    center_feature: np.ndarray


def init_pagwn_params(n: int, seed: int, momentum: float = 0.1, bn_eps: float = 1e-5,
                      mode: str = "training") -> PagwnParams:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, unit batch norm."""
    if n < 1:
        raise DomainError("shape-mismatch", f"feature dimension must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    s1 = np.sqrt(1.0 / (n + 3))
    s2 = np.sqrt(1.0 / (2 * n))
    return PagwnParams(
        lb1_weight=rng.uniform(-s1, s1, size=(n + 3, n)),
        lb1_bias=np.zeros(n),
        lb1_bn=BatchNormState.initial(n, momentum=momentum, eps=bn_eps, mode=mode),
        lb2_weight=rng.uniform(-s2, s2, size=(2 * n, 2 * n)),
        lb2_bias=np.zeros(2 * n),
        lb2_bn=BatchNormState.initial(2 * n, momentum=momentum, eps=bn_eps, mode=mode),
    )


def _check_batch(nc, nf, cc, cf, params: PagwnParams):
    if nc.ndim != 3 or nf.ndim != 3 or cc.ndim != 2 or cf.ndim != 2:
        raise DomainError("shape-mismatch", "batched inputs must be (M,K,3), (M,K,n), (M,3), (M,n)")
    m_win, k, _ = nc.shape
    n = params.n
    if nc.shape[2] != 3 or cc.shape != (m_win, 3):
        raise DomainError("shape-mismatch", "coordinate arrays must have 3 channels")
    if nf.shape != (m_win, k, n) or cf.shape != (m_win, n):
        raise DomainError("shape-mismatch", f"feature arrays disagree with params n={n}")
    if params.lb1_bn.mode != params.lb2_bn.mode:
        raise DomainError("invalid-spec", "lb1 and lb2 batch norms are in different modes")


def _pre_rows(nc, nf, cc, cf, params: PagwnParams, m: int, epsilon: float):
    """GWN + LB1 over a batch; returns ((M*K, n) rows, context)."""
    m_win, k, _ = nc.shape
    n = params.n
    windows = np.concatenate([nc, nf], axis=2)
    centers = np.concatenate([cc, cf], axis=1)
    gwn, gwn_cache = _gwn_forward(windows, centers, m, epsilon)
    gwn_rows = gwn.reshape(m_win * k, n + 3)
    z1 = _linear_forward(gwn_rows, params.lb1_weight, params.lb1_bias)
    bn1_out, bn1_cache = _bn_forward(z1, params.lb1_bn)
    return bn1_out, (gwn_rows, gwn_cache, bn1_cache)


def _forward_arrays(nc, nf, cc, cf, params: PagwnParams, m: int, epsilon: float,
                    single_input: bool) -> PagwnOutput:
    _check_batch(nc, nf, cc, cf, params)
    m_win, k, _ = nc.shape
    n = params.n
    if not epsilon > 0:
        raise DomainError("invalid-spec", f"epsilon must be > 0, got {epsilon}")

    bn1_out, (gwn_rows, gwn_cache, bn1_cache) = _pre_rows(nc, nf, cc, cf, params, m, epsilon)
    pre = bn1_out.reshape(m_win, k, n)
    h = np.concatenate([pre, np.broadcast_to(cf[:, None, :], (m_win, k, n))], axis=2)
    h_rows = h.reshape(m_win * k, 2 * n)
    z2 = _linear_forward(h_rows, params.lb2_weight, params.lb2_bias)
    bn2_out, bn2_cache = _bn_forward(z2, params.lb2_bn)
    rows2 = bn2_out.reshape(m_win, k, 2 * n)
    argmax = rows2.argmax(axis=1)  # first occurrence: ties go to the lowest row
    pooled = np.take_along_axis(rows2, argmax[:, None, :], axis=1)[:, 0, :]
    aggregated = np.maximum(pooled, 0.0)

    cache = PagwnCache(
        params=params, mode=params.lb1_bn.mode, single_input=single_input,
        shapes=(m_win, k, n), gwn_rows=gwn_rows, gwn_cache=gwn_cache,
        bn1_cache=bn1_cache, h_rows=h_rows, bn2_cache=bn2_cache,
        pooled=pooled, argmax=argmax,
    )
    bn1_new = bn2_new = None
    if params.lb1_bn.mode == "training":
        bn1_new = params.lb1_bn.updated(bn1_cache[3], bn1_cache[4])
        bn2_new = params.lb2_bn.updated(bn2_cache[3], bn2_cache[4])
    return PagwnOutput(
        aggregated=aggregated[0] if single_input else aggregated,
        cache=cache, updated_lb1_bn=bn1_new, updated_lb2_bn=bn2_new,
    )


def pre_abstract(inp: PagwnInput, params: PagwnParams, m: int = DEFAULT_SPLIT,
                 epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """LB1(GWN([c_j || x_j])) for one window: a (K, n) matrix.

    Reduces each (n+3)-channel normalized row back to n channels so the
    neighbor rows carry the same dimensionality as the center feature.
    """
    nc = inp.neighbor_coords[None]
    nf = inp.neighbor_features[None]
    cc = inp.center_coord[None]
    cf = inp.center_feature[None]
    _check_batch(nc, nf, cc, cf, params)
    if not epsilon > 0:
        raise DomainError("invalid-spec", f"epsilon must be > 0, got {epsilon}")
    bn1_out, _ = _pre_rows(nc, nf, cc, cf, params, m, epsilon)
    return bn1_out.reshape(inp.k, params.n)


def pagwn_forward(inp: PagwnInput, params: PagwnParams, m: int = DEFAULT_SPLIT,
                  epsilon: float = DEFAULT_EPSILON) -> PagwnOutput:
    """Full block for one center; aggregated output has 2n channels."""
    return _forward_arrays(
        inp.neighbor_coords[None], inp.neighbor_features[None],
        inp.center_coord[None], inp.center_feature[None],
        params, m, epsilon, single_input=True,
    )


def pagwn_forward_batch(neighbor_coords, neighbor_features, center_coords, center_features,
                        params: PagwnParams, m: int = DEFAULT_SPLIT,
                        epsilon: float = DEFAULT_EPSILON) -> PagwnOutput:
    """Full block over M centers at once; batch norm sees all M*K rows."""
    return _forward_arrays(
        np.asarray(neighbor_coords, dtype=np.float64),
        np.asarray(neighbor_features, dtype=np.float64),
        np.asarray(center_coords, dtype=np.float64),
        np.asarray(center_features, dtype=np.float64),
        params, m, epsilon, single_input=False,
    )


def pagwn_backward(cache: PagwnCache, upstream_grad: np.ndarray) -> PagwnGradients:
    """Exact gradients for every parameter and input of a training forward.

    ReLU uses subgradient 0 at 0; the max pool routes to the argmax row
    (ties already resolved to the lowest index by the forward); batch norm
    differentiates through its batch statistics; GWN differentiates through
    each group sigma.
    """
    if cache.mode != "training":
        raise DomainError("stale-cache", "backward requires a cache from a training-mode forward")
    params = cache.params
    m_win, k, n = cache.shapes
    g = np.asarray(upstream_grad, dtype=np.float64)
    if cache.single_input:
        g = g.reshape(1, 2 * n)
    if g.shape != (m_win, 2 * n):
        raise DomainError("shape-mismatch", f"upstream gradient must have shape {(m_win, 2 * n)}")

    g_pool = g * (cache.pooled > 0)
    g_rows2 = np.zeros((m_win, k, 2 * n))
    np.put_along_axis(g_rows2, cache.argmax[:, None, :], g_pool[:, None, :], axis=1)
    dz2, dgamma2, dbeta2 = _bn_backward(g_rows2.reshape(m_win * k, 2 * n), params.lb2_bn, cache.bn2_cache)
    dh, dw2, db2 = _linear_backward(dz2, cache.h_rows, params.lb2_weight)
    dh = dh.reshape(m_win, k, 2 * n)
    d_pre = dh[:, :, :n].reshape(m_win * k, n)
    d_cf_broadcast = dh[:, :, n:].sum(axis=1)

    dz1, dgamma1, dbeta1 = _bn_backward(d_pre, params.lb1_bn, cache.bn1_cache)
    d_gwn_rows, dw1, db1 = _linear_backward(dz1, cache.gwn_rows, params.lb1_weight)
    d_win, d_cen = _gwn_backward(d_gwn_rows.reshape(m_win, k, n + 3), cache.gwn_cache)

    d_nc = d_win[:, :, :3]
    d_nf = d_win[:, :, 3:]
    d_cc = d_cen[:, :3]
    d_cf = d_cen[:, 3:] + d_cf_broadcast

    if cache.single_input:
        d_nc, d_nf, d_cc, d_cf = d_nc[0], d_nf[0], d_cc[0], d_cf[0]
    return PagwnGradients(
        lb1_weight=dw1, lb1_bias=db1, lb1_gamma=dgamma1, lb1_beta=dbeta1,
        lb2_weight=dw2, lb2_bias=db2, lb2_gamma=dgamma2, lb2_beta=dbeta2,
        neighbor_coords=d_nc, neighbor_features=d_nf,
        center_coord=d_cc, center_feature=d_cf,
    )


def sgd_step(params: PagwnParams, grads: PagwnGradients, lr: float,
             bn_updates: Optional[Tuple[BatchNormState, BatchNormState]] = None) -> PagwnParams:
    """One plain SGD update; optionally fold in fresh running statistics."""
    bn1 = bn_updates[0] if bn_updates else params.lb1_bn
    bn2 = bn_updates[1] if bn_updates else params.lb2_bn
    return PagwnParams(
        lb1_weight=params.lb1_weight - lr * grads.lb1_weight,
        lb1_bias=params.lb1_bias - lr * grads.lb1_bias,
        lb1_bn=replace(bn1, gamma=bn1.gamma - lr * grads.lb1_gamma, beta=bn1.beta - lr * grads.lb1_beta),
        lb2_weight=params.lb2_weight - lr * grads.lb2_weight,
        lb2_bias=params.lb2_bias - lr * grads.lb2_bias,
        lb2_bn=replace(bn2, gamma=bn2.gamma - lr * grads.lb2_gamma, beta=bn2.beta - lr * grads.lb2_beta),
    )


def with_updated_bn(params: PagwnParams, output: PagwnOutput) -> PagwnParams:
    """Adopt the running statistics captured by a training forward."""
    if output.updated_lb1_bn is None:
        return params
    return replace(params, lb1_bn=output.updated_lb1_bn, lb2_bn=output.updated_lb2_bn)


# ---------------------------------------------------------------------------
# Baseline aggregators: MLP + max pool over BQ / KNN neighborhoods
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MlpLayer:
    """Linear + batch norm + ReLU, the classic aggregation MLP layer."""

    weight: np.ndarray  # (in, out)
    bias: np.ndarray    # (out,)
    bn: BatchNormState  # out channels

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[1],) or self.bn.channels != w.shape[1]:
            raise DomainError("shape-mismatch", "MLP layer arrays disagree on output channels")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True, eq=False)
class MlpParams:
    layers: Tuple[MlpLayer, ...]

    def __post_init__(self):
        if not self.layers:
            raise DomainError("shape-mismatch", "an MLP needs at least one layer")
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def with_mode(self, mode: str) -> "MlpParams":
        return MlpParams(tuple(replace(l, bn=l.bn.with_mode(mode)) for l in self.layers))


@dataclass(eq=False)
class MlpGradients:
    weight: List[np.ndarray]
    bias: List[np.ndarray]
    gamma: List[np.ndarray]
    beta: List[np.ndarray]


def init_mlp_params(dims: Sequence[int], seed: int, momentum: float = 0.1,
                    bn_eps: float = 1e-5, mode: str = "training") -> MlpParams:
    """Stack of linear+BN+ReLU layers sized dims[0] -> ... -> dims[-1]."""
    if len(dims) < 2:
        raise DomainError("shape-mismatch", "dims must name at least an input and an output size")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = np.sqrt(1.0 / fan_in)
        layers.append(MlpLayer(
            weight=rng.uniform(-s, s, size=(fan_in, fan_out)),
            bias=np.zeros(fan_out),
            bn=BatchNormState.initial(fan_out, momentum=momentum, eps=bn_eps, mode=mode),
        ))
    return MlpParams(tuple(layers))


def _mlp_rows_forward(rows: np.ndarray, params: MlpParams):
    caches = []
    x = rows
    for layer in params.layers:
        z = _linear_forward(x, layer.weight, layer.bias)
        y, bn_cache = _bn_forward(z, layer.bn)
        mask = y > 0
        caches.append((x, bn_cache, mask))
        x = y * mask
    return x, caches


def _mlp_rows_backward(g: np.ndarray, params: MlpParams, caches):
    grads = MlpGradients(weight=[], bias=[], gamma=[], beta=[])
    for layer, (x, bn_cache, mask) in zip(reversed(params.layers), reversed(caches)):
        g = g * mask
        dz, dgamma, dbeta = _bn_backward(g, layer.bn, bn_cache)
        g, dw, db = _linear_backward(dz, x, layer.weight)
        grads.weight.append(dw)
        grads.bias.append(db)
        grads.gamma.append(dgamma)
        grads.beta.append(dbeta)
    for field in (grads.weight, grads.bias, grads.gamma, grads.beta):
        field.reverse()
    return g, grads


def mlp_updated_bn(params: MlpParams, caches) -> MlpParams:
    """Fold the batch statistics of a training forward into running stats."""
    layers = []
    for layer, (_, bn_cache, _) in zip(params.layers, caches):
        if bn_cache[0] == "training":
            layers.append(replace(layer, bn=layer.bn.updated(bn_cache[3], bn_cache[4])))
        else:
            layers.append(layer)
    return MlpParams(tuple(layers))


def mlp_sgd_step(params: MlpParams, grads: MlpGradients, lr: float) -> MlpParams:
    layers = []
    for i, layer in enumerate(params.layers):
        layers.append(MlpLayer(
            weight=layer.weight - lr * grads.weight[i],
            bias=layer.bias - lr * grads.bias[i],
            bn=replace(layer.bn, gamma=layer.bn.gamma - lr * grads.gamma[i],
                       beta=layer.bn.beta - lr * grads.beta[i]),
        ))
    return MlpParams(tuple(layers))


@dataclass(eq=False)
class BaselineCache:
    params: MlpParams
    mode: str
    neighbor_indices: np.ndarray  # (M, K) into the source cloud
    occupied: np.ndarray          # (M,) False where the region was empty
    mlp_caches: list
    argmax: np.ndarray            # (M_occupied, out)
    k: int
    num_source_points: int


@dataclass(frozen=True, eq=False)
class BaselineOutput:
    """Per-center aggregated features; empty regions yield zero vectors."""

    features: np.ndarray          # (M, out)
    empty_region: np.ndarray      # (M,) bool
    cache: BaselineCache


def aggregate_precomputed(source_features: np.ndarray, neighbor_indices: np.ndarray,
                          occupied: np.ndarray, mlp_params: MlpParams) -> BaselineOutput:
    """MLP + max pool over already-resolved neighborhoods.

    ``source_features`` is the (N, n) matrix rows are gathered from;
    centers whose ``occupied`` flag is False get a zero output.
    """
    m_cnt, k = neighbor_indices.shape
    out_dim = mlp_params.out_dim
    features = np.zeros((m_cnt, out_dim))
    occ_idx = np.flatnonzero(occupied)
    if occ_idx.size:
        rows = source_features[neighbor_indices[occ_idx].reshape(-1)]
        pooled_rows, caches = _mlp_rows_forward(rows, mlp_params)
        grouped = pooled_rows.reshape(occ_idx.size, k, out_dim)
        argmax = grouped.argmax(axis=1)
        features[occ_idx] = np.take_along_axis(grouped, argmax[:, None, :], axis=1)[:, 0, :]
    else:
        caches = []
        argmax = np.zeros((0, out_dim), dtype=np.int64)
    cache = BaselineCache(
        params=mlp_params, mode=mlp_params.layers[0].bn.mode,
        neighbor_indices=neighbor_indices, occupied=occupied, mlp_caches=caches,
        argmax=argmax, k=k, num_source_points=source_features.shape[0],
    )
    return BaselineOutput(features=features, empty_region=~occupied, cache=cache)


def aggregate_knn_baseline(cloud: PointCloud, sampled_indices, k: int,
                           mlp_params: MlpParams, index: Optional[KdIndex] = None) -> BaselineOutput:
    """MaxPool{ MLP(neighbor features) } over each center's KNN window."""
    sampled = np.asarray(sampled_indices, dtype=np.int64)
    idx = index if index is not None else build_index(cloud)
    hoods = np.empty((sampled.size, k), dtype=np.int64)
    for row, center in enumerate(sampled):
        hood = knn_query(idx, cloud.coords[center], k, center_index=int(center))
        hoods[row] = hood.neighbor_indices
    occupied = np.ones(sampled.size, dtype=bool)
    return aggregate_precomputed(cloud.features, hoods, occupied, mlp_params)


def aggregate_bq_baseline(cloud: PointCloud, sampled_indices, radius: float, k_max: int,
                          mlp_params: MlpParams, index: Optional[KdIndex] = None) -> BaselineOutput:
    """MaxPool{ MLP(neighbor features) } over ball-query windows.

    Under-full regions come back padded by the spatial rules; regions with
    no points at all produce a zero vector and an ``empty_region`` flag.
    """
    sampled = np.asarray(sampled_indices, dtype=np.int64)
    idx = index if index is not None else build_index(cloud)
    hoods = np.zeros((sampled.size, k_max), dtype=np.int64)
    occupied = np.zeros(sampled.size, dtype=bool)
    for row, center in enumerate(sampled):
        result = ball_query(idx, cloud.coords[center], radius, k_max, center_index=int(center))
        if not result.empty:
            hoods[row] = result.neighborhood.neighbor_indices
            occupied[row] = True
    return aggregate_precomputed(cloud.features, hoods, occupied, mlp_params)


def baseline_backward(cache: BaselineCache, upstream_grad: np.ndarray):
    """Gradients for the MLP and the source cloud's features.

    Returns (MlpGradients, d_features) where d_features has the source
    cloud's (N, n) shape with neighbor contributions scatter-added.
    """
    if cache.mode != "training":
        raise DomainError("stale-cache", "backward requires a training-mode forward cache")
    g = np.asarray(upstream_grad, dtype=np.float64)
    occ_idx = np.flatnonzero(cache.occupied)
    out_dim = cache.params.out_dim
    if occ_idx.size == 0:
        grads = MlpGradients(
            weight=[np.zeros_like(l.weight) for l in cache.params.layers],
            bias=[np.zeros_like(l.bias) for l in cache.params.layers],
            gamma=[np.zeros_like(l.bn.gamma) for l in cache.params.layers],
            beta=[np.zeros_like(l.bn.beta) for l in cache.params.layers],
        )
        return grads, np.zeros((cache.num_source_points, cache.params.in_dim))
    g_rows = np.zeros((occ_idx.size, cache.k, out_dim))
    np.put_along_axis(g_rows, cache.argmax[:, None, :], g[occ_idx][:, None, :], axis=1)
    d_rows, grads = _mlp_rows_backward(g_rows.reshape(-1, out_dim), cache.params, cache.mlp_caches)
    d_rows = d_rows.reshape(occ_idx.size * cache.k, -1)
    d_features = np.zeros((cache.num_source_points, d_rows.shape[1]))
    np.add.at(d_features, cache.neighbor_indices[occ_idx].reshape(-1), d_rows)
    return grads, d_features


# ---------------------------------------------------------------------------
# Checkpoint serialization (tensor dictionaries for io.save_tensor_dir)
# ---------------------------------------------------------------------------

def _bn_tensors(bn: BatchNormState, prefix: str) -> dict:
    return {
        prefix + "gamma": bn.gamma,
        prefix + "beta": bn.beta,
        prefix + "running_mean": bn.running_mean,
        prefix + "running_var": bn.running_var,
        prefix + "momentum": np.float64(bn.momentum),
        prefix + "eps": np.float64(bn.eps),
    }


def _bn_from_tensors(tensors: dict, prefix: str, mode: str) -> BatchNormState:
    return BatchNormState(
        gamma=tensors[prefix + "gamma"],
        beta=tensors[prefix + "beta"],
        running_mean=tensors[prefix + "running_mean"],
        running_var=tensors[prefix + "running_var"],
        momentum=float(tensors[prefix + "momentum"]),
        eps=float(tensors[prefix + "eps"]),
        mode=mode,
    )


def pagwn_param_tensors(params: PagwnParams, prefix: str = "") -> dict:
    """Flatten a parameter set into named tensors (mode is a runtime flag)."""
    out = {
        prefix + "lb1_weight": params.lb1_weight,
        prefix + "lb1_bias": params.lb1_bias,
        prefix + "lb2_weight": params.lb2_weight,
        prefix + "lb2_bias": params.lb2_bias,
    }
    out.update(_bn_tensors(params.lb1_bn, prefix + "lb1_bn."))
    out.update(_bn_tensors(params.lb2_bn, prefix + "lb2_bn."))
    return out


def pagwn_params_from_tensors(tensors: dict, prefix: str = "", mode: str = "inference") -> PagwnParams:
    return PagwnParams(
        lb1_weight=tensors[prefix + "lb1_weight"],
        lb1_bias=tensors[prefix + "lb1_bias"],
        lb1_bn=_bn_from_tensors(tensors, prefix + "lb1_bn.", mode),
        lb2_weight=tensors[prefix + "lb2_weight"],
        lb2_bias=tensors[prefix + "lb2_bias"],
        lb2_bn=_bn_from_tensors(tensors, prefix + "lb2_bn.", mode),
    )


def mlp_param_tensors(params: MlpParams, prefix: str = "") -> dict:
    out = {prefix + "num_layers": np.int64(len(params.layers))}
    for i, layer in enumerate(params.layers):
        out[f"{prefix}layer{i}.weight"] = layer.weight
        out[f"{prefix}layer{i}.bias"] = layer.bias
        out.update(_bn_tensors(layer.bn, f"{prefix}layer{i}.bn."))
    return out


def mlp_params_from_tensors(tensors: dict, prefix: str = "", mode: str = "inference") -> MlpParams:
    count = int(tensors[prefix + "num_layers"])
    layers = []
    for i in range(count):
        layers.append(MlpLayer(
            weight=tensors[f"{prefix}layer{i}.weight"],
            bias=tensors[f"{prefix}layer{i}.bias"],
            bn=_bn_from_tensors(tensors, f"{prefix}layer{i}.bn.", mode),
        ))
    return MlpParams(tuple(layers))


def pagwn_input_tensors(inp: PagwnInput) -> dict:
    return {
        "center_coord": inp.center_coord,
        "center_feature": inp.center_feature,
        "neighbor_coords": inp.neighbor_coords,
        "neighbor_features": inp.neighbor_features,
    }


def pagwn_input_from_tensors(tensors: dict) -> PagwnInput:
    return PagwnInput(
        center_coord=tensors["center_coord"],
        center_feature=tensors["center_feature"],
        neighbor_coords=tensors["neighbor_coords"],
        neighbor_features=tensors["neighbor_features"],
    )
