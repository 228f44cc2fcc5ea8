"""Synthetic scenes, segmentation metrics, and a toy hierarchical pipeline.

The pipeline is deliberately small: stacked (farthest point sampling +
local aggregation) encoder stages, nearest-sampled-point feature
propagation back to full resolution, and a per-point classifier head
trained with plain SGD and cross-entropy.  It exists to exercise the
aggregators under controlled density imbalance, not to chase benchmark
numbers.  Everything is deterministic for a fixed (config, scenes, seed).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import util
from .core import DomainError, MetricsReport, PointCloud
from .pagwn import (
    MlpParams,
    PagwnParams,
    aggregate_precomputed,
    baseline_backward,
    init_mlp_params,
    init_pagwn_params,
    mlp_param_tensors,
    mlp_sgd_step,
    mlp_updated_bn,
    pagwn_backward,
    pagwn_forward_batch,
    pagwn_param_tensors,
    sgd_step,
    with_updated_bn,
)
from .sampling import fps_coords
from .spatial import KdIndex, ball_query, knn_query

AGGREGATORS = ("pagwn", "knn_baseline", "bq_baseline")

# distinct unit-scale base colors per class label
_PALETTE = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [0.6, 0.6, 0.6],
    [1.0, 0.5, 0.0],
])


def class_color(label: int) -> np.ndarray:
    return _PALETTE[label % len(_PALETTE)]


# ---------------------------------------------------------------------------
# Synthetic scene generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegionSpec:
    """One scene region: a primitive populated at a given surface density.

    ``density_scale`` is points per unit area for planes and spheres, and
    points per unit length for box edges.
    """

    primitive: str  # plane | sphere | box-edge
    point_count: int
    density_scale: float
    class_label: int
    feature_noise_sigma: float = 0.0


@dataclass(frozen=True)
class SyntheticSceneSpec:
    regions: Tuple[RegionSpec, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        if not self.regions:
            raise DomainError("invalid-spec", "a scene needs at least one region")
        for i, region in enumerate(self.regions):
            if region.primitive not in ("plane", "sphere", "box-edge"):
                raise DomainError("invalid-spec", f"region {i}: unknown primitive {region.primitive!r}")
            if region.point_count < 1:
                raise DomainError("invalid-spec", f"region {i}: point_count must be >= 1")
            if not region.density_scale > 0:
                raise DomainError("invalid-spec", f"region {i}: density_scale must be > 0")
            if region.feature_noise_sigma < 0:
                raise DomainError("invalid-spec", f"region {i}: feature_noise_sigma must be >= 0")
            if region.class_label < 0:
                raise DomainError("invalid-spec", f"region {i}: class_label must be >= 0")


def plane_side(point_count: int, density_scale: float) -> float:
    """Side of the square patch that realizes the requested area density."""
    return float(np.sqrt(point_count / density_scale))


def generate_scene(spec: SyntheticSceneSpec) -> PointCloud:
    """Deterministic labeled cloud with the requested per-region densities.

    Plane regions are chained like floors and walls: a horizontal patch,
    then a vertical patch rising from its far edge, and so on, so that
    consecutive planes share an edge.  Spheres and box wireframes are
    placed on a separate row at negative y, clear of the plane chain.
    Features are the class base color plus white noise.
    """
    rng = np.random.default_rng(spec.seed)
    coords_parts, feats_parts, label_parts = [], [], []
    cursor_x, cursor_z = 0.0, 0.0
    horizontal = True
    aux_x = 0.0
    for region in spec.regions:
        count = region.point_count
        if region.primitive == "plane":
            side = plane_side(count, region.density_scale)
            u = rng.random(count) * side
            v = rng.random(count) * side
            if horizontal:
                pts = np.stack([cursor_x + u, v, np.full(count, cursor_z)], axis=1)
                cursor_x += side
            else:
                pts = np.stack([np.full(count, cursor_x), v, cursor_z + u], axis=1)
                cursor_z += side
            horizontal = not horizontal
        elif region.primitive == "sphere":
            radius = float(np.sqrt(count / (4.0 * np.pi * region.density_scale)))
            raw = rng.normal(size=(count, 3))
            raw /= np.linalg.norm(raw, axis=1, keepdims=True)
            center = np.array([aux_x + 2 * radius, -4.0 * radius, 2.0 * radius])
            pts = center + radius * raw
            aux_x += 4 * radius
        else:  # box-edge wireframe
            side = count / (12.0 * region.density_scale)
            edge_id = rng.integers(0, 12, size=count)
            t = rng.random(count) * side
            pts = _box_edge_points(edge_id, t, side)
            pts += np.array([aux_x + side, -4.0 * side, 0.0])
            aux_x += 3 * side
        base = class_color(region.class_label)
        noise = rng.normal(0.0, region.feature_noise_sigma, size=(count, 3)) \
            if region.feature_noise_sigma > 0 else 0.0
        coords_parts.append(pts)
        feats_parts.append(base + noise * np.ones((count, 3)))
        label_parts.append(np.full(count, region.class_label, dtype=np.int64))
    return PointCloud(
        coords=np.concatenate(coords_parts),
        features=np.concatenate(feats_parts),
        labels=np.concatenate(label_parts),
    )


def _box_edge_points(edge_id: np.ndarray, t: np.ndarray, side: float) -> np.ndarray:
    # 12 edges of the [0, side]^3 cube: (origin corner, axis direction)
    origins = np.array([
        [0, 0, 0], [0, 1, 0], [0, 0, 1], [0, 1, 1],  # along x
        [0, 0, 0], [1, 0, 0], [0, 0, 1], [1, 0, 1],  # along y
        [0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],  # along z
    ], dtype=np.float64) * side
    axes = np.array([[1, 0, 0]] * 4 + [[0, 1, 0]] * 4 + [[0, 0, 1]] * 4, dtype=np.float64)
    return origins[edge_id] + axes[edge_id] * t[:, None]


def two_plane_boundary_scene(seed: int, point_count: int = 1024, density: float = 400.0,
                             noise: float = 0.02, band_scale: float = 1.5):
    """Two constant-color planes meeting at an edge, with a boundary band.

    Returns (cloud, boundary_mask): the mask marks points whose distance to
    the shared floor/wall edge is below band_scale times the mean point
    spacing.  Used to check that high-sigma centers hug real boundaries.
    """
    spec = SyntheticSceneSpec(
        regions=(
            RegionSpec("plane", point_count, density, class_label=0, feature_noise_sigma=noise),
            RegionSpec("plane", point_count, density, class_label=1, feature_noise_sigma=noise),
        ),
        seed=seed,
    )
    cloud = generate_scene(spec)
    side = plane_side(point_count, density)
    spacing = 1.0 / np.sqrt(density)
    # the chained layout puts the shared edge at x = side, z = 0
    dist_to_edge = np.sqrt((cloud.coords[:, 0] - side) ** 2 + cloud.coords[:, 2] ** 2)
    boundary = dist_to_edge < band_scale * spacing
    return cloud, boundary


def density_imbalanced_scene(seed: int, dense_count: int = 768, sparse_count: int = 256,
                             dense_density: float = 300.0, sparse_density: float = 100.0,
                             noise: float = 0.25) -> PointCloud:
    """Two-class floor/wall scene whose classes differ in point density."""
    return generate_scene(SyntheticSceneSpec(
        regions=(
            RegionSpec("plane", dense_count, dense_density, class_label=0, feature_noise_sigma=noise),
            RegionSpec("plane", sparse_count, sparse_density, class_label=1, feature_noise_sigma=noise),
        ),
        seed=seed,
    ))


def constant_label_scene(seed: int, point_count: int = 256, label: int = 0) -> PointCloud:
    """Single-plane scene where every point carries the same class."""
    return generate_scene(SyntheticSceneSpec(
        regions=(RegionSpec("plane", point_count, 200.0, class_label=label, feature_noise_sigma=0.1),),
        seed=seed,
    ))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def compute_metrics(pred_labels, true_labels, num_classes: int) -> MetricsReport:
    """Per-class IoU and accuracy plus mIoU / mAcc / OA.

    IoU_c = TP / (TP + FP + FN); acc_c = TP / (TP + FN).  Classes absent
    from both prediction and ground truth are NaN and excluded from the
    means; OA is exactly correct / total.
    """
    pred = np.asarray(pred_labels).ravel()
    truth = np.asarray(true_labels).ravel()
    if pred.shape != truth.shape:
        raise DomainError("length-mismatch", f"pred has {pred.size} labels, truth has {truth.size}")
    if pred.size == 0:
        raise DomainError("length-mismatch", "cannot score zero points")
    c = int(num_classes)
    if c < 1:
        raise DomainError("label-out-of-range", f"class count must be >= 1, got {c}")
    for name, arr in (("pred", pred), ("truth", truth)):
        bad = (arr < 0) | (arr >= c)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DomainError("label-out-of-range", f"{name}[{i}] = {arr[i]} outside [0, {c})")

    confusion = np.bincount(truth * c + pred, minlength=c * c).reshape(c, c)
    tp = np.diag(confusion).astype(np.float64)
    fn = confusion.sum(axis=1) - tp
    fp = confusion.sum(axis=0) - tp

    iou_den = tp + fp + fn
    acc_den = tp + fn
    iou = np.divide(tp, iou_den, out=np.full(c, np.nan), where=iou_den > 0)
    acc = np.divide(tp, acc_den, out=np.full(c, np.nan), where=acc_den > 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN mean stays NaN
        miou = float(np.nanmean(iou))
        macc = float(np.nanmean(acc))
    oa = float(tp.sum() / pred.size)
    return MetricsReport(per_class_iou=iou, per_class_acc=acc, miou=miou, macc=macc, oa=oa)


def _fmt(value: float) -> str:
    return repr(float(value))


def metrics_csv(report: MetricsReport) -> str:
    """UTF-8 CSV: header class,iou,acc; footer rows miou, macc, oa."""
    lines = ["class,iou,acc"]
    for c in range(report.num_classes):
        lines.append(f"{c},{_fmt(report.per_class_iou[c])},{_fmt(report.per_class_acc[c])}")
    lines.append(f"miou,{_fmt(report.miou)}")
    lines.append(f"macc,{_fmt(report.macc)}")
    lines.append(f"oa,{_fmt(report.oa)}")
    return "\n".join(lines) + "\n"


def metrics_text(report: MetricsReport) -> str:
    lines = [f"{'class':>8} {'iou':>10} {'acc':>10}"]
    for c in range(report.num_classes):
        lines.append(f"{c:>8} {report.per_class_iou[c]:>10.4f} {report.per_class_acc[c]:>10.4f}")
    lines.append(f"mIoU {report.miou:.4f}  mAcc {report.macc:.4f}  OA {report.oa:.4f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Toy pipeline configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageSpec:
    """One encoder stage: sample m_points centers, aggregate k neighbors."""

    m_points: int
    k: int
    split: int = 3


@dataclass(frozen=True)
class ToyPipelineConfig:
    stages: Tuple[StageSpec, ...]
    num_classes: int
    head_hidden: Tuple[int, ...] = (16,)
    epochs: int = 30
    learning_rate: float = 0.05
    batch_size: int = 4
    seed: int = 0
    aggregator: str = "pagwn"
    epsilon: float = 1e-5
    bq_radius: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "head_hidden", tuple(self.head_hidden))
        if not self.stages:
            raise DomainError("invalid-spec", "the pipeline needs at least one stage")
        counts = [s.m_points for s in self.stages]
        if any(b > a for a, b in zip(counts, counts[1:])):
            raise DomainError("invalid-spec", f"stage sample counts must be non-increasing, got {counts}")
        for i, stage in enumerate(self.stages):
            if stage.m_points < 1 or stage.k < 1:
                raise DomainError("invalid-spec", f"stage {i}: m_points and k must be >= 1")
            if not 1 <= stage.split < max(stage.k, 2):
                raise DomainError("bad-split", f"stage {i}: split {stage.split} outside [1, {stage.k - 1}]")
        if self.aggregator not in AGGREGATORS:
            raise DomainError("invalid-spec", f"aggregator must be one of {AGGREGATORS}")
        if self.aggregator == "bq_baseline" and (self.bq_radius is None or self.bq_radius <= 0):
            raise DomainError("invalid-spec", "bq_baseline needs a positive bq_radius")
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("invalid-spec", "epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise DomainError("invalid-spec", f"learning_rate must be > 0, got {self.learning_rate}")
        if self.num_classes < 2:
            raise DomainError("invalid-spec", "segmentation needs at least 2 classes")

    def with_split(self, m: int) -> "ToyPipelineConfig":
        return replace(self, stages=tuple(replace(s, split=m) for s in self.stages))


def _derived_seed(*parts: int) -> int:
    seed = 0
    for p in parts:
        seed = (seed * 1_000_003 + int(p) + 0x9E3779B9) % (1 << 63)
    return seed


# ---------------------------------------------------------------------------
# Per-point classifier head (linear / ReLU stack, no batch norm)
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HeadParams:
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]


def _init_head(dims: Sequence[int], seed: int) -> HeadParams:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = np.sqrt(1.0 / fan_in)
        weights.append(rng.uniform(-s, s, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return HeadParams(weights=tuple(weights), biases=tuple(biases))


def _head_forward(x: np.ndarray, head: HeadParams):
    caches = []
    last = len(head.weights) - 1
    for i, (w, b) in enumerate(zip(head.weights, head.biases)):
        z = x @ w + b
        if i < last:
            mask = z > 0
            caches.append((x, mask))
            x = z * mask
        else:
            caches.append((x, None))
            x = z
    return x, caches


def _head_backward(g: np.ndarray, head: HeadParams, caches):
    dws = [None] * len(head.weights)
    dbs = [None] * len(head.weights)
    for i in range(len(head.weights) - 1, -1, -1):
        x, mask = caches[i]
        if mask is not None:
            g = g * mask
        dws[i] = x.T @ g
        dbs[i] = g.sum(axis=0)
        g = g @ head.weights[i].T
    return g, (dws, dbs)


def _head_sgd(head: HeadParams, grads, lr: float) -> HeadParams:
    dws, dbs = grads
    return HeadParams(
        weights=tuple(w - lr * dw for w, dw in zip(head.weights, dws)),
        biases=tuple(b - lr * db for b, db in zip(head.biases, dbs)),
    )


def _softmax_ce(logits: np.ndarray, labels: np.ndarray, num_classes: int):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    n = logits.shape[0]
    loss = float(-log_p[np.arange(n), labels].mean())
    dlogits = np.exp(log_p)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


# ---------------------------------------------------------------------------
# Scene plans: all geometry is fixed per (scene, config), so compute it once
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _StagePlan:
    center_indices: np.ndarray
    neighbor_indices: np.ndarray
    occupied: np.ndarray
    center_coords: np.ndarray
    neighbor_coords: np.ndarray
    split: int
    num_prev: int


@dataclass(eq=False)
class _ScenePlan:
    scene: PointCloud
    stages: List[_StagePlan]
    full_map: np.ndarray  # full resolution -> final-stage center position


def _plan_scene(scene: PointCloud, config: ToyPipelineConfig, scene_id: int) -> _ScenePlan:
    coords = scene.coords
    full_map = np.arange(coords.shape[0], dtype=np.int64)
    stages = []
    for t, stage in enumerate(config.stages):
        n_cur = coords.shape[0]
        if stage.m_points > n_cur:
            raise DomainError("m-out-of-range", f"stage {t} samples {stage.m_points} of {n_cur} points")
        if stage.k > n_cur:
            raise DomainError("k-out-of-range", f"stage {t} wants {stage.k} neighbors of {n_cur} points")
        centers = fps_coords(coords, stage.m_points, _derived_seed(config.seed, scene_id, t))
        index = KdIndex(coords)
        hoods = np.zeros((centers.size, stage.k), dtype=np.int64)
        occupied = np.ones(centers.size, dtype=bool)
        for row, center in enumerate(centers):
            if config.aggregator == "bq_baseline":
                result = ball_query(index, coords[center], config.bq_radius, stage.k,
                                    center_index=int(center))
                if result.empty:
                    occupied[row] = False
                else:
                    hoods[row] = result.neighborhood.neighbor_indices
            else:
                hoods[row] = knn_query(index, coords[center], stage.k,
                                       center_index=int(center)).neighbor_indices
        center_coords = coords[centers]
        center_index = KdIndex(center_coords)
        nn_map = np.empty(n_cur, dtype=np.int64)
        for i in range(n_cur):
            nn_map[i] = knn_query(center_index, coords[i], 1).neighbor_indices[0]
        full_map = nn_map[full_map]
        stages.append(_StagePlan(
            center_indices=centers, neighbor_indices=hoods, occupied=occupied,
            center_coords=center_coords, neighbor_coords=coords[hoods],
            split=stage.split, num_prev=n_cur,
        ))
        coords = center_coords
    return _ScenePlan(scene=scene, stages=stages, full_map=full_map)


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PipelineResult:
    """Trained parameters, per-epoch losses, and test metrics."""

    metrics: MetricsReport
    stage_params: list
    head: HeadParams
    losses: List[float]
    config: ToyPipelineConfig


def _encode(plan: _ScenePlan, stage_params, config: ToyPipelineConfig):
    """Run the encoder over one scene; returns (final features, caches)."""
    x = plan.scene.features
    caches = []
    for splan, params in zip(plan.stages, stage_params):
        if config.aggregator == "pagwn":
            out = pagwn_forward_batch(
                splan.neighbor_coords, x[splan.neighbor_indices],
                splan.center_coords, x[splan.center_indices],
                params, splan.split, config.epsilon,
            )
            x = out.aggregated
        else:
            out = aggregate_precomputed(x, splan.neighbor_indices, splan.occupied, params)
            x = out.features
        caches.append(out)
    return x, caches


def _backward_stages(plan: _ScenePlan, caches, d_final: np.ndarray, config: ToyPipelineConfig):
    """Gradient of the loss w.r.t. every stage's parameters."""
    g = d_final
    stage_grads = []
    for splan, out in zip(reversed(plan.stages), reversed(caches)):
        if config.aggregator == "pagwn":
            grads = pagwn_backward(out.cache, g)
            n_prev = grads.neighbor_features.shape[-1]
            d_prev = np.zeros((splan.num_prev, n_prev))
            np.add.at(d_prev, splan.neighbor_indices.reshape(-1),
                      grads.neighbor_features.reshape(-1, n_prev))
            np.add.at(d_prev, splan.center_indices, grads.center_feature)
            # input gradients are consumed here; zero them so per-scene
            # accumulation never mixes differently shaped arrays
            grads.neighbor_coords = grads.neighbor_features = 0.0
            grads.center_coord = grads.center_feature = 0.0
        else:
            grads, d_prev = baseline_backward(out.cache, g)
        stage_grads.append(grads)
        g = d_prev
    stage_grads.reverse()
    return stage_grads


def _add_grads(total, fresh):
    if total is None:
        return fresh
    for acc, new in zip(total, fresh):
        if hasattr(acc, "__dataclass_fields__"):
            for field in acc.__dataclass_fields__:
                a, b = getattr(acc, field), getattr(new, field)
                if isinstance(a, list):
                    for i in range(len(a)):
                        a[i] = a[i] + b[i]
                else:
                    setattr(acc, field, a + b)
        else:
            raise AssertionError("unexpected gradient container")
    return total


def _scale_grads(grads, factor: float):
    for g in grads:
        for field in g.__dataclass_fields__:
            value = getattr(g, field)
            if isinstance(value, list):
                for i in range(len(value)):
                    value[i] = value[i] * factor
            else:
                setattr(g, field, value * factor)
    return grads


def _init_stage_params(config: ToyPipelineConfig, feature_dim: int):
    params = []
    n = feature_dim
    for t in range(len(config.stages)):
        seed = _derived_seed(config.seed, 7919, t)
        if config.aggregator == "pagwn":
            params.append(init_pagwn_params(n, seed))
        else:
            params.append(init_mlp_params((n, 2 * n), seed))
        n = 2 * n
    return params, n


def run_toy_pipeline(config: ToyPipelineConfig, train_scenes: Sequence[PointCloud],
                     test_scenes: Sequence[PointCloud]) -> PipelineResult:
    """Train the encoder + head on labeled scenes and score the test set.

    Deterministic per (config, scenes): identical inputs give bit-identical
    metrics.  Raises ``divergence`` naming the epoch if the loss leaves the
    finite range.
    """
    if not train_scenes or not test_scenes:
        raise DomainError("invalid-spec", "need at least one training and one test scene")
    for scene in list(train_scenes) + list(test_scenes):
        if scene.labels is None:
            raise DomainError("invalid-spec", "pipeline scenes must carry labels")
    feature_dim = train_scenes[0].feature_dim
    if any(s.feature_dim != feature_dim for s in list(train_scenes) + list(test_scenes)):
        raise DomainError("dimension-mismatch", "all scenes must share one feature dimension")

    train_plans = [_plan_scene(s, config, i) for i, s in enumerate(train_scenes)]
    test_plans = [_plan_scene(s, config, 10_000 + i) for i, s in enumerate(test_scenes)]

    stage_params, final_dim = _init_stage_params(config, feature_dim)
    head = _init_head([final_dim, *config.head_hidden, config.num_classes],
                      _derived_seed(config.seed, 104729))
    order_rng = np.random.default_rng(_derived_seed(config.seed, 15485863))

    losses = []
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(train_plans))
        epoch_loss = 0.0
        try:
            for start in range(0, len(order), config.batch_size):
                batch = [train_plans[i] for i in order[start:start + config.batch_size]]
                head_acc = None
                stage_acc = None
                for plan in batch:
                    x_final, caches = _encode(plan, stage_params, config)
                    # adopt fresh running statistics as soon as they exist
                    for t, out in enumerate(caches):
                        if config.aggregator == "pagwn":
                            stage_params[t] = with_updated_bn(stage_params[t], out)
                        else:
                            stage_params[t] = mlp_updated_bn(stage_params[t], out.cache.mlp_caches)
                    feats = x_final[plan.full_map]
                    logits, head_cache = _head_forward(feats, head)
                    loss, dlogits = _softmax_ce(logits, plan.scene.labels, config.num_classes)
                    if not np.isfinite(loss):
                        raise DomainError("divergence", f"loss became non-finite at epoch {epoch}")
                    epoch_loss += loss
                    d_feats, head_grads = _head_backward(dlogits, head, head_cache)
                    d_final = np.zeros_like(x_final)
                    np.add.at(d_final, plan.full_map, d_feats)
                    stage_grads = _backward_stages(plan, caches, d_final, config)
                    head_acc = _add_grads(head_acc, [_HeadGradBox(head_grads)])
                    stage_acc = _add_grads(stage_acc, stage_grads)
                scale = 1.0 / len(batch)
                _scale_grads(stage_acc, scale)
                for t in range(len(stage_params)):
                    if config.aggregator == "pagwn":
                        stage_params[t] = sgd_step(stage_params[t], stage_acc[t], config.learning_rate)
                    else:
                        stage_params[t] = mlp_sgd_step(stage_params[t], stage_acc[t], config.learning_rate)
                box = head_acc[0]
                head = _head_sgd(head, ([d * scale for d in box.dws], [d * scale for d in box.dbs]),
                                 config.learning_rate)
        except DomainError as exc:
            # exploding parameters surface as non-finite activations mid-epoch
            if exc.kind == "non-finite-value":
                raise DomainError("divergence", f"non-finite values at epoch {epoch}") from exc
            raise
        epoch_loss /= len(train_plans)
        if not np.isfinite(epoch_loss):
            raise DomainError("divergence", f"loss became non-finite at epoch {epoch}")
        losses.append(epoch_loss)

    infer_params = [p.with_mode("inference") for p in stage_params]

    def predict(plan: _ScenePlan) -> np.ndarray:
        x_final, _ = _encode(plan, infer_params, config)
        logits, _ = _head_forward(x_final[plan.full_map], head)
        return logits.argmax(axis=1)

    chunks = util.map_chunks(lambda plans: [predict(p) for p in plans], test_plans, chunk_size=1)
    preds = [p for chunk in chunks for p in chunk]
    pred_all = np.concatenate(preds)
    truth_all = np.concatenate([p.scene.labels for p in test_plans])
    metrics = compute_metrics(pred_all, truth_all, config.num_classes)
    return PipelineResult(metrics=metrics, stage_params=infer_params, head=head,
                          losses=losses, config=config)


@dataclass(eq=False)
class _HeadGradBox:
    """Lets head gradients ride through the generic accumulators."""

    dws: list
    dbs: list

    def __init__(self, grads):
        self.dws = list(grads[0])
        self.dbs = list(grads[1])


def pipeline_param_tensors(result: PipelineResult) -> dict:
    """Flatten every trained parameter into one checkpoint dictionary."""
    out = {}
    for t, params in enumerate(result.stage_params):
        if isinstance(params, PagwnParams):
            out.update(pagwn_param_tensors(params, prefix=f"stage{t}."))
        elif isinstance(params, MlpParams):
            out.update(mlp_param_tensors(params, prefix=f"stage{t}."))
    for i, (w, b) in enumerate(zip(result.head.weights, result.head.biases)):
        out[f"head.layer{i}.weight"] = w
        out[f"head.layer{i}.bias"] = b
    return out


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def paired_comparison(config: ToyPipelineConfig, train_scenes, test_scenes,
                      aggregators: Sequence[str] = ("pagwn", "knn_baseline")):
    """Run several aggregators on identical scenes and seed; returns
    {aggregator: PipelineResult}."""
    results = {}
    for name in aggregators:
        results[name] = run_toy_pipeline(replace(config, aggregator=name), train_scenes, test_scenes)
    return results


def ablate_m(config: ToyPipelineConfig, m_values: Sequence[int], train_scenes,
             test_scenes) -> List[Tuple[int, MetricsReport]]:
    """Rerun the pipeline varying only the group split m; fixed seeds.

    Duplicate m values are dropped with a warning.  Each row mirrors the
    grouping-size ablation layout: m, mIoU, mAcc, OA.
    """
    seen = []
    for m in m_values:
        if m in seen:
            warnings.warn(f"duplicate m={m} ignored", stacklevel=2)
            continue
        seen.append(m)
    rows = []
    for m in seen:
        for i, stage in enumerate(config.stages):
            if not 1 <= m < stage.k:
                raise DomainError("bad-split", f"m={m} outside [1, {stage.k - 1}] for stage {i}")
        result = run_toy_pipeline(config.with_split(m), train_scenes, test_scenes)
        rows.append((m, result.metrics))
    return rows


def ablate_csv(rows: List[Tuple[int, MetricsReport]]) -> str:
    lines = ["m,miou,macc,oa"]
    for m, report in rows:
        lines.append(f"{m},{_fmt(report.miou)},{_fmt(report.macc)},{_fmt(report.oa)}")
    return "\n".join(lines) + "\n"
