import json
import subprocess
import sys

import numpy as np
import pytest

from pgrain import farthest_point_sample
from pgrain import io as pio
from pgrain.cli import main
from pgrain.eval import compute_metrics, density_imbalanced_scene, metrics_csv
from pgrain.norm import Window, group_wise_window_normalize, sigma_map, window_normalize
from pgrain.pagwn import (
    init_pagwn_params,
    pagwn_forward,
    pagwn_input_tensors,
    pagwn_param_tensors,
)

from test_pagwn import random_input


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "pgrain.cli", *args],
        capture_output=True, text=True,
    )


@pytest.fixture
def scene_file(tmp_path):
    cloud = density_imbalanced_scene(5, dense_count=96, sparse_count=48)
    path = tmp_path / "scene.xyz"
    pio.write_xyz(path, cloud)
    return path, cloud


class TestSample:
    def test_fps_matches_library_call(self, scene_file, tmp_path):
        path, cloud = scene_file
        out = tmp_path / "sampled.xyz"
        assert main(["sample", str(path), "--has-label", "--method", "fps",
                     "--count", "7", "--seed", "3", "--out", str(out)]) == 0
        expected = farthest_point_sample(cloud, 7, seed=3)
        got = np.loadtxt(out.with_suffix(".xyz.idx"), dtype=np.int64)
        np.testing.assert_array_equal(got, expected)
        back = pio.read_xyz(out, feature_dim=3, has_label=True)
        np.testing.assert_array_equal(back.coords, cloud.coords[expected])

    def test_count_zero_is_domain_error(self, scene_file, tmp_path):
        path, _ = scene_file
        result = run_cli("sample", str(path), "--has-label", "--count", "0",
                         "--out", str(tmp_path / "x.xyz"))
        assert result.returncode == 1
        assert "m-out-of-range" in result.stderr

    def test_missing_required_flag_is_usage_error(self, scene_file):
        path, _ = scene_file
        result = run_cli("sample", str(path))
        assert result.returncode == 2
        assert "usage" in result.stderr.lower()

    def test_single_point_output(self, scene_file, tmp_path):
        path, _ = scene_file
        out = tmp_path / "one.xyz"
        assert main(["sample", str(path), "--has-label", "--method", "fps",
                     "--count", "1", "--seed", "7", "--out", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 1


class TestSigmaMap:
    def test_matches_library(self, scene_file, tmp_path, capsys):
        path, cloud = scene_file
        out = tmp_path / "flagged.xyz"
        assert main(["sigma-map", str(path), "--has-label", "--k", "12",
                     "--threshold", "0.2", "--out", str(out)]) == 0
        printed = capsys.readouterr().out
        flagged = sigma_map(cloud, k=12, threshold=0.2)
        assert str(flagged.size) in printed
        back = pio.read_xyz(out, feature_dim=3, has_label=True)
        np.testing.assert_array_equal(back.coords, cloud.coords[flagged])

    def test_threshold_zero_flags_everything(self, scene_file, tmp_path, capsys):
        path, cloud = scene_file
        out = tmp_path / "flagged.xyz"
        assert main(["sigma-map", str(path), "--has-label", "--k", "8",
                     "--threshold", "0", "--out", str(out)]) == 0
        assert f"{cloud.num_points} points" in capsys.readouterr().out


class TestNormalize:
    def test_matches_library_plain_and_grouped(self, rng, tmp_path):
        center = rng.normal(size=4)
        neighbors = rng.normal(size=(6, 4))
        pio.write_tensor(tmp_path / "c.pgtn", center)
        pio.write_tensor(tmp_path / "n.pgtn", neighbors)
        out = tmp_path / "out.pgtn"
        window = Window(center_feature=center, neighbor_features=neighbors)

        assert main(["normalize", "--center", str(tmp_path / "c.pgtn"),
                     "--neighbors", str(tmp_path / "n.pgtn"), "--out", str(out)]) == 0
        np.testing.assert_array_equal(pio.read_tensor(out), window_normalize(window).values)

        assert main(["normalize", "--center", str(tmp_path / "c.pgtn"),
                     "--neighbors", str(tmp_path / "n.pgtn"), "--m", "2", "--out", str(out)]) == 0
        np.testing.assert_array_equal(
            pio.read_tensor(out), group_wise_window_normalize(window, m=2).values)


class TestPagwnForward:
    def test_serialized_round_trip_equals_in_process(self, rng, tmp_path):
        n, k = 4, 6
        inp = random_input(rng, n, k)
        params = init_pagwn_params(n, seed=5).with_mode("inference")
        pio.save_tensor_dir(tmp_path / "inp", pagwn_input_tensors(inp))
        pio.save_tensor_dir(tmp_path / "par", pagwn_param_tensors(params))
        out = tmp_path / "agg.pgtn"
        assert main(["pagwn-forward", "--input", str(tmp_path / "inp"),
                     "--params", str(tmp_path / "par"), "--m", "3", "--out", str(out)]) == 0
        expected = pagwn_forward(inp, params, m=3).aggregated
        np.testing.assert_array_equal(pio.read_tensor(out), expected)


class TestEval:
    def test_matches_compute_metrics(self, rng, tmp_path):
        pred = rng.integers(0, 3, size=50)
        truth = rng.integers(0, 3, size=50)
        pio.write_labels(tmp_path / "pred.txt", pred)
        pio.write_labels(tmp_path / "truth.txt", truth)
        out = tmp_path / "report.csv"
        assert main(["eval", "--pred", str(tmp_path / "pred.txt"),
                     "--truth", str(tmp_path / "truth.txt"),
                     "--classes", "3", "--out", str(out)]) == 0
        assert out.read_text(encoding="utf-8") == metrics_csv(compute_metrics(pred, truth, 3))


class TestTrainToy:
    def _config(self, tmp_path, **kw):
        config = {
            "stages": [{"m_points": 32, "k": 8, "split": 3}],
            "num_classes": 2, "head_hidden": [8], "epochs": 3,
            "learning_rate": 0.1, "batch_size": 2, "seed": 1,
            "aggregator": "pagwn",
            "scenes": {"kind": "density_imbalanced", "train": 2, "test": 1, "base_seed": 0},
        }
        config.update(kw)
        path = tmp_path / "toy.json"
        path.write_text(json.dumps(config), encoding="utf-8")
        return path

    def test_train_writes_metrics_and_checkpoint(self, tmp_path):
        config = self._config(tmp_path)
        out = tmp_path / "metrics.csv"
        ckpt = tmp_path / "ckpt"
        assert main(["train-toy", "--config", str(config), "--out", str(out),
                     "--checkpoint", str(ckpt)]) == 0
        lines = out.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "class,iou,acc"
        assert (ckpt / "manifest.txt").exists()
        tensors = pio.load_tensor_dir(ckpt)
        assert "stage0.lb1_weight" in tensors
        assert "head.layer0.weight" in tensors

    def test_unknown_config_key_rejected(self, tmp_path):
        config = self._config(tmp_path, optimizer="adam")
        result = run_cli("train-toy", "--config", str(config),
                         "--out", str(tmp_path / "m.csv"))
        assert result.returncode == 1
        assert "invalid-spec" in result.stderr

    def test_ablate_emits_one_row_per_m(self, tmp_path):
        config = self._config(tmp_path)
        out = tmp_path / "ablation.csv"
        assert main(["ablate-m", "--config", str(config), "--m", "1,2,3,4",
                     "--out", str(out)]) == 0
        lines = out.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "m,miou,macc,oa"
        assert len(lines) == 5


class TestDeterminism:
    def test_sample_is_byte_identical_across_runs(self, scene_file, tmp_path):
        path, _ = scene_file
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{tag}.xyz"
            result = run_cli("sample", str(path), "--has-label", "--method", "random",
                             "--count", "9", "--seed", "11", "--out", str(out))
            assert result.returncode == 0
            outs.append(out.read_bytes() + (out.parent / (out.name + ".idx")).read_bytes())
        assert outs[0] == outs[1]
