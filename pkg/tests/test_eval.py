import numpy as np
import pytest

from pgrain import DomainError, compute_metrics
from pgrain.eval import (
    RegionSpec,
    StageSpec,
    SyntheticSceneSpec,
    ToyPipelineConfig,
    ablate_csv,
    ablate_m,
    constant_label_scene,
    density_imbalanced_scene,
    generate_scene,
    metrics_csv,
    plane_side,
    run_toy_pipeline,
    two_plane_boundary_scene,
)


def metrics_oracle(pred, truth, c):
    """Independent dict-counting confusion oracle."""
    tp = {k: 0 for k in range(c)}
    fp = {k: 0 for k in range(c)}
    fn = {k: 0 for k in range(c)}
    for p, t in zip(pred, truth):
        if p == t:
            tp[t] += 1
        else:
            fp[p] += 1
            fn[t] += 1
    iou, acc = {}, {}
    for k in range(c):
        iou[k] = tp[k] / (tp[k] + fp[k] + fn[k]) if tp[k] + fp[k] + fn[k] else None
        acc[k] = tp[k] / (tp[k] + fn[k]) if tp[k] + fn[k] else None
    defined_iou = [v for v in iou.values() if v is not None]
    defined_acc = [v for v in acc.values() if v is not None]
    oa = sum(tp.values()) / len(pred)
    return iou, acc, sum(defined_iou) / len(defined_iou), sum(defined_acc) / len(defined_acc), oa


class TestComputeMetrics:
    def test_perfect_prediction(self):
        report = compute_metrics([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert report.miou == 1.0 and report.macc == 1.0 and report.oa == 1.0

    def test_hand_confusion_case(self):
        report = compute_metrics([0, 1, 1, 1], [0, 0, 1, 1], 2)
        assert report.per_class_iou[0] == 0.5
        assert report.per_class_iou[1] == 2.0 / 3.0
        assert report.per_class_acc[0] == 0.5
        assert report.per_class_acc[1] == 1.0
        assert report.oa == 0.75
        assert report.macc == 0.75
        assert report.miou == pytest.approx(7.0 / 12.0, rel=1e-15, abs=0)

    def test_all_wrong_two_class(self):
        report = compute_metrics([1, 0, 1, 0], [0, 1, 0, 1], 2)
        assert report.oa == 0.0 and report.miou == 0.0

    def test_absent_class_is_nan_and_excluded(self):
        report = compute_metrics([0, 0], [0, 0], 3)
        assert np.isnan(report.per_class_iou[1]) and np.isnan(report.per_class_iou[2])
        assert report.miou == 1.0

    def test_class_predicted_but_absent_from_truth(self):
        # IoU defined (zero), accuracy undefined
        report = compute_metrics([1, 0], [0, 0], 2)
        assert report.per_class_iou[1] == 0.0
        assert np.isnan(report.per_class_acc[1])

    def test_errors(self):
        with pytest.raises(DomainError) as exc:
            compute_metrics([0, 1], [0], 2)
        assert exc.value.kind == "length-mismatch"
        with pytest.raises(DomainError) as exc:
            compute_metrics([0, 2], [0, 1], 2)
        assert exc.value.kind == "label-out-of-range"

    def test_matches_oracle_on_random_cases(self, rng):
        for _ in range(200):
            c = int(rng.integers(2, 6))
            n = int(rng.integers(1, 60))
            pred = rng.integers(0, c, size=n)
            truth = rng.integers(0, c, size=n)
            report = compute_metrics(pred, truth, c)
            iou, acc, miou, macc, oa = metrics_oracle(pred.tolist(), truth.tolist(), c)
            for k in range(c):
                if iou[k] is None:
                    assert np.isnan(report.per_class_iou[k])
                else:
                    assert report.per_class_iou[k] == iou[k]
                if acc[k] is None:
                    assert np.isnan(report.per_class_acc[k])
                else:
                    assert report.per_class_acc[k] == acc[k]
            assert report.oa == oa
            assert report.miou == pytest.approx(miou, rel=1e-12)
            assert report.macc == pytest.approx(macc, rel=1e-12)

    def test_iou_never_exceeds_accuracy(self, rng):
        for _ in range(50):
            c = int(rng.integers(2, 5))
            pred = rng.integers(0, c, size=100)
            truth = rng.integers(0, c, size=100)
            report = compute_metrics(pred, truth, c)
            both = ~np.isnan(report.per_class_iou) & ~np.isnan(report.per_class_acc)
            assert np.all(report.per_class_iou[both] <= report.per_class_acc[both] + 1e-15)

    def test_oa_is_frequency_weighted_accuracy(self, rng):
        c = 3
        pred = rng.integers(0, c, size=200)
        truth = rng.integers(0, c, size=200)
        report = compute_metrics(pred, truth, c)
        weights = np.bincount(truth, minlength=c) / 200.0
        accs = np.where(np.isnan(report.per_class_acc), 0.0, report.per_class_acc)
        assert report.oa == pytest.approx(float((weights * accs).sum()), rel=1e-12)

    def test_joint_permutation_invariance(self, rng):
        pred = rng.integers(0, 3, size=80)
        truth = rng.integers(0, 3, size=80)
        perm = rng.permutation(80)
        a = compute_metrics(pred, truth, 3)
        b = compute_metrics(pred[perm], truth[perm], 3)
        assert a.miou == b.miou and a.macc == b.macc and a.oa == b.oa

    def test_csv_layout(self):
        report = compute_metrics([0, 1, 1, 1], [0, 0, 1, 1], 2)
        lines = metrics_csv(report).splitlines()
        assert lines[0] == "class,iou,acc"
        assert len(lines) == 1 + 2 + 3
        assert lines[-3].startswith("miou,") and lines[-1].startswith("oa,")

    def test_text_report_carries_all_three_means(self):
        from pgrain.eval import metrics_text
        report = compute_metrics([0, 1, 1, 1], [0, 0, 1, 1], 2)
        text = metrics_text(report)
        assert "mIoU 0.5833" in text and "mAcc 0.7500" in text and "OA 0.7500" in text


class TestSceneGeneration:
    def test_single_plane_region(self):
        spec = SyntheticSceneSpec(regions=(RegionSpec("plane", 100, 50.0, 2),), seed=1)
        cloud = generate_scene(spec)
        assert cloud.num_points == 100
        assert np.all(cloud.labels == 2)
        assert np.all(cloud.coords[:, 2] == 0.0)  # first plane is the floor

    def test_same_seed_is_identical(self):
        spec = SyntheticSceneSpec(
            regions=(RegionSpec("plane", 64, 50.0, 0, 0.1), RegionSpec("sphere", 64, 50.0, 1, 0.1)),
            seed=9,
        )
        a, b = generate_scene(spec), generate_scene(spec)
        assert np.array_equal(a.coords, b.coords)
        assert np.array_equal(a.features, b.features)

    def test_density_scales_separate_nn_distances(self):
        from pgrain.spatial import build_index, knn_query
        dense, sparse = 10.0, 1.0
        spec = SyntheticSceneSpec(
            regions=(RegionSpec("plane", 400, dense, 0), RegionSpec("plane", 400, sparse, 1)),
            seed=3,
        )
        cloud = generate_scene(spec)
        index = build_index(cloud)
        mean_nn = np.empty(cloud.num_points)
        for i in range(cloud.num_points):
            hood = knn_query(index, cloud.coords[i], 9, center_index=i)
            mean_nn[i] = hood.distances[1:].mean()  # skip self
        ratio = mean_nn[cloud.labels == 1].mean() / mean_nn[cloud.labels == 0].mean()
        assert ratio >= (dense / sparse) ** (1.0 / 3.0) / 2.0
        assert ratio > 1.0

    def test_sphere_points_on_surface(self):
        spec = SyntheticSceneSpec(regions=(RegionSpec("sphere", 200, 100.0, 0),), seed=4)
        cloud = generate_scene(spec)
        radius = np.sqrt(200 / (4 * np.pi * 100.0))
        center = cloud.coords.mean(axis=0)
        dist = np.linalg.norm(cloud.coords - center, axis=1)
        np.testing.assert_allclose(dist, radius, rtol=0.15)

    def test_box_edge_points_on_wireframe(self):
        spec = SyntheticSceneSpec(regions=(RegionSpec("box-edge", 240, 100.0, 0),), seed=5)
        cloud = generate_scene(spec)
        side = 240 / (12 * 100.0)
        local = cloud.coords - cloud.coords.min(axis=0)
        # every wireframe point has at least two coordinates at a cube edge
        snapped = (np.abs(local) < 1e-9) | (np.abs(local - side) < 1e-9)
        assert np.all(snapped.sum(axis=1) >= 2)

    def test_invalid_specs_rejected(self):
        with pytest.raises(DomainError):
            SyntheticSceneSpec(regions=(), seed=0)
        with pytest.raises(DomainError):
            SyntheticSceneSpec(regions=(RegionSpec("cone", 10, 1.0, 0),), seed=0)
        with pytest.raises(DomainError):
            SyntheticSceneSpec(regions=(RegionSpec("plane", 0, 1.0, 0),), seed=0)

    def test_boundary_scene_band_tracks_edge(self):
        cloud, boundary = two_plane_boundary_scene(seed=0, point_count=400, density=400.0)
        side = plane_side(400, 400.0)
        dist = np.sqrt((cloud.coords[:, 0] - side) ** 2 + cloud.coords[:, 2] ** 2)
        assert boundary.any() and not boundary.all()
        assert dist[boundary].max() < dist[~boundary].min() + 1e-12


class TestToyPipeline:
    def _tiny_config(self, **kw):
        defaults = dict(
            stages=(StageSpec(m_points=32, k=8, split=3),),
            num_classes=2,
            head_hidden=(8,),
            epochs=5,
            learning_rate=0.1,
            batch_size=2,
            seed=0,
            aggregator="pagwn",
        )
        defaults.update(kw)
        return ToyPipelineConfig(**defaults)

    def test_constant_label_scenes_reach_perfect_oa(self):
        train = [constant_label_scene(seed, point_count=96) for seed in range(3)]
        test = [constant_label_scene(99, point_count=96)]
        result = run_toy_pipeline(self._tiny_config(), train, test)
        assert result.metrics.oa == 1.0

    def test_deterministic_to_the_last_bit(self):
        train = [density_imbalanced_scene(s, dense_count=96, sparse_count=48) for s in range(2)]
        test = [density_imbalanced_scene(77, dense_count=96, sparse_count=48)]
        config = self._tiny_config(epochs=3)
        a = run_toy_pipeline(config, train, test)
        b = run_toy_pipeline(config, train, test)
        assert a.metrics.miou == b.metrics.miou
        assert a.metrics.oa == b.metrics.oa
        assert a.losses == b.losses

    def test_divergence_is_reported_with_epoch(self):
        # constant-label scenes cannot diverge (overshooting saturates the
        # softmax in the right direction), so use a two-class task
        train = [density_imbalanced_scene(0, dense_count=96, sparse_count=48)]
        test = [density_imbalanced_scene(1, dense_count=96, sparse_count=48)]
        with np.errstate(all="ignore"), pytest.raises(DomainError) as exc:
            run_toy_pipeline(self._tiny_config(learning_rate=1e200, epochs=5), train, test)
        assert exc.value.kind == "divergence"
        assert "epoch" in str(exc.value)

    def test_baseline_aggregators_run(self):
        train = [density_imbalanced_scene(s, dense_count=96, sparse_count=48) for s in range(2)]
        test = [density_imbalanced_scene(50, dense_count=96, sparse_count=48)]
        for aggregator, extra in (("knn_baseline", {}), ("bq_baseline", {"bq_radius": 0.6})):
            config = self._tiny_config(aggregator=aggregator, epochs=2, **extra)
            result = run_toy_pipeline(config, train, test)
            assert 0.0 <= result.metrics.oa <= 1.0

    def test_scenes_must_be_labeled(self, rng):
        from conftest import random_cloud
        unlabeled = random_cloud(rng, n_points=40)
        with pytest.raises(DomainError) as exc:
            run_toy_pipeline(self._tiny_config(), [unlabeled], [unlabeled])
        assert exc.value.kind == "invalid-spec"

    def test_config_validation(self):
        with pytest.raises(DomainError):
            self._tiny_config(stages=())
        with pytest.raises(DomainError):  # increasing sample counts
            self._tiny_config(stages=(StageSpec(8, 4, 2), StageSpec(16, 4, 2)))
        with pytest.raises(DomainError):  # split out of range
            self._tiny_config(stages=(StageSpec(8, 4, 4),))
        with pytest.raises(DomainError):
            self._tiny_config(aggregator="transformer")
        with pytest.raises(DomainError):
            self._tiny_config(aggregator="bq_baseline")  # radius missing


class TestAblateM:
    def _scenes(self):
        train = [density_imbalanced_scene(s, dense_count=96, sparse_count=48) for s in range(2)]
        test = [density_imbalanced_scene(60, dense_count=96, sparse_count=48)]
        return train, test

    def _config(self):
        return ToyPipelineConfig(
            stages=(StageSpec(m_points=32, k=8, split=3),),
            num_classes=2, head_hidden=(8,), epochs=2, learning_rate=0.1,
            batch_size=2, seed=0, aggregator="pagwn",
        )

    def test_single_value_reproduces_direct_run(self):
        train, test = self._scenes()
        config = self._config()
        direct = run_toy_pipeline(config, train, test)
        rows = ablate_m(config, [3], train, test)
        assert len(rows) == 1
        assert rows[0][0] == 3
        assert rows[0][1].miou == direct.metrics.miou
        assert rows[0][1].oa == direct.metrics.oa

    def test_duplicates_warn_and_dedupe(self):
        train, test = self._scenes()
        with pytest.warns(UserWarning, match="duplicate"):
            rows = ablate_m(self._config(), [2, 2, 3], train, test)
        assert [m for m, _ in rows] == [2, 3]

    def test_csv_has_one_row_per_m(self):
        train, test = self._scenes()
        rows = ablate_m(self._config(), [1, 2, 3, 4], train, test)
        lines = ablate_csv(rows).splitlines()
        assert lines[0] == "m,miou,macc,oa"
        assert len(lines) == 5

    def test_out_of_range_m_rejected(self):
        train, test = self._scenes()
        with pytest.raises(DomainError) as exc:
            ablate_m(self._config(), [8], train, test)
        assert exc.value.kind == "bad-split"
