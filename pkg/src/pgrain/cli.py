"""Batch command-line surface over the pgrain library.

Every command is non-interactive, seeded, and idempotent: the same inputs
and flags always produce byte-identical outputs.  Exit codes: 0 success,
1 domain error, 2 usage error.  The PGRAIN_THREADS environment variable
caps internal worker threads without affecting any output.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import eval as ev
from . import io as pio
from . import norm, pagwn, sampling
from .core import DomainError, PointCloud


def _load_cloud(path: str, feature_dim, has_label: bool) -> PointCloud:
    if path.endswith(".ply"):
        return pio.read_ply(path)
    if feature_dim is None:
        with open(path, "r", encoding="utf-8") as fh:
            first = fh.readline().split()
        feature_dim = len(first) - 3 - (1 if has_label else 0)
    return pio.read_xyz(path, feature_dim=feature_dim, has_label=has_label)


def _add_cloud_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("input", help="input cloud (.xyz text or .ply)")
    parser.add_argument("--feature-dim", type=int, default=None,
                        help="feature columns in an .xyz file (default: inferred)")
    parser.add_argument("--has-label", action="store_true",
                        help="the last .xyz column is an integer class label")


def _cmd_sample(args) -> int:
    cloud = _load_cloud(args.input, args.feature_dim, args.has_label)
    if args.method == "fps":
        indices = sampling.farthest_point_sample(cloud, args.count, args.seed)
    else:
        indices = sampling.random_sample(cloud, args.count, args.seed)
    subset = PointCloud(
        coords=cloud.coords[indices],
        features=cloud.features[indices],
        labels=None if cloud.labels is None else cloud.labels[indices],
    )
    pio.write_xyz(args.out, subset)
    sidecar = args.indices_out or args.out + ".idx"
    with open(sidecar, "w", encoding="utf-8") as fh:
        for i in indices:
            fh.write(f"{int(i)}\n")
    print(f"sampled {len(indices)} points -> {args.out} (indices: {sidecar})")
    return 0


def _cmd_sigma_map(args) -> int:
    cloud = _load_cloud(args.input, args.feature_dim, args.has_label)
    flagged = norm.sigma_map(cloud, args.k, threshold=args.threshold,
                             use_coords=args.use_coords)
    subset_labels = None if cloud.labels is None else cloud.labels[flagged]
    if flagged.size:
        subset = PointCloud(cloud.coords[flagged], cloud.features[flagged], subset_labels)
        pio.write_xyz(args.out, subset)
    else:
        Path(args.out).write_text("", encoding="utf-8")
    print(f"{flagged.size} points with window sigma > {args.threshold}")
    return 0


def _cmd_normalize(args) -> int:
    center = pio.read_tensor(args.center)
    neighbors = pio.read_tensor(args.neighbors)
    window = norm.Window(center_feature=center, neighbor_features=neighbors)
    if args.m is None:
        result = norm.window_normalize(window, epsilon=args.epsilon)
        sigmas = [result.stats.sigma]
    else:
        result = norm.group_wise_window_normalize(window, m=args.m, epsilon=args.epsilon)
        sigmas = [s.sigma for s in result.stats]
    pio.write_tensor(args.out, result.values)
    print("sigma " + " ".join(repr(float(s)) for s in sigmas))
    return 0


def _cmd_pagwn_forward(args) -> int:
    inp = pagwn.pagwn_input_from_tensors(pio.load_tensor_dir(args.input))
    params = pagwn.pagwn_params_from_tensors(pio.load_tensor_dir(args.params), mode=args.mode)
    out = pagwn.pagwn_forward(inp, params, m=args.m, epsilon=args.epsilon)
    pio.write_tensor(args.out, out.aggregated)
    print(f"aggregated {out.aggregated.shape[0]} channels -> {args.out}")
    return 0


def _scene_sets(spec: dict):
    kind = spec.get("kind", "density_imbalanced")
    base = int(spec.get("base_seed", 0))
    n_train = int(spec["train"])
    n_test = int(spec["test"])
    makers = {
        "density_imbalanced": ev.density_imbalanced_scene,
        "constant_label": ev.constant_label_scene,
    }
    if kind not in makers:
        raise DomainError("invalid-spec", f"unknown scene kind {kind!r}")
    make = makers[kind]
    train = [make(base + i) for i in range(n_train)]
    test = [make(base + n_train + i) for i in range(n_test)]
    return train, test


def _config_from_file(path: str) -> tuple:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    scenes = raw.pop("scenes")
    stages = tuple(ev.StageSpec(**s) for s in raw.pop("stages"))
    config = ev.ToyPipelineConfig(
        stages=stages,
        num_classes=int(raw.pop("num_classes")),
        head_hidden=tuple(raw.pop("head_hidden", (16,))),
        epochs=int(raw.pop("epochs", 30)),
        learning_rate=float(raw.pop("learning_rate", 0.05)),
        batch_size=int(raw.pop("batch_size", 4)),
        seed=int(raw.pop("seed", 0)),
        aggregator=raw.pop("aggregator", "pagwn"),
        epsilon=float(raw.pop("epsilon", 1e-5)),
        bq_radius=raw.pop("bq_radius", None),
    )
    if raw:
        raise DomainError("invalid-spec", f"unknown config keys: {sorted(raw)}")
    return config, scenes


def _cmd_train_toy(args) -> int:
    config, scene_spec = _config_from_file(args.config)
    train, test = _scene_sets(scene_spec)
    result = ev.run_toy_pipeline(config, train, test)
    Path(args.out).write_text(ev.metrics_csv(result.metrics), encoding="utf-8")
    if args.checkpoint:
        pio.save_tensor_dir(args.checkpoint, ev.pipeline_param_tensors(result))
    print(ev.metrics_text(result.metrics), end="")
    return 0


def _cmd_eval(args) -> int:
    pred = pio.read_labels(args.pred)
    truth = pio.read_labels(args.truth)
    report = ev.compute_metrics(pred, truth, args.classes)
    Path(args.out).write_text(ev.metrics_csv(report), encoding="utf-8")
    print(ev.metrics_text(report), end="")
    return 0


def _cmd_ablate_m(args) -> int:
    config, scene_spec = _config_from_file(args.config)
    train, test = _scene_sets(scene_spec)
    m_values = [int(tok) for tok in args.m.split(",") if tok.strip()]
    rows = ev.ablate_m(config, m_values, train, test)
    Path(args.out).write_text(ev.ablate_csv(rows), encoding="utf-8")
    for m, report in rows:
        print(f"m={m} mIoU {report.miou!r} mAcc {report.macc!r} OA {report.oa!r}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pgrain",
        description="Point cloud downsampling toolkit: sampling, window "
                    "normalization, PAGWN aggregation, and a toy segmentation pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="select representative points")
    _add_cloud_args(p)
    p.add_argument("--method", choices=("fps", "random"), default="fps")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--indices-out", default=None)
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("sigma-map", help="flag centers whose window sigma exceeds a threshold")
    _add_cloud_args(p)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--threshold", type=float, default=1.0)
    p.add_argument("--use-coords", action=argparse.BooleanOptionalAction, default=True,
                   help="build windows over [coords, features] (default) or features only")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_sigma_map)

    p = sub.add_parser("normalize", help="window-normalize one neighborhood from tensor files")
    p.add_argument("--center", required=True)
    p.add_argument("--neighbors", required=True)
    p.add_argument("--m", type=int, default=None, help="group split; omit for ungrouped")
    p.add_argument("--epsilon", type=float, default=norm.DEFAULT_EPSILON)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_normalize)

    p = sub.add_parser("pagwn-forward", help="run the aggregation block on a serialized input")
    p.add_argument("--input", required=True, help="tensor directory with the window")
    p.add_argument("--params", required=True, help="tensor directory with block parameters")
    p.add_argument("--m", type=int, default=pagwn.DEFAULT_SPLIT)
    p.add_argument("--epsilon", type=float, default=pagwn.DEFAULT_EPSILON)
    p.add_argument("--mode", choices=("training", "inference"), default="inference")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_pagwn_forward)

    p = sub.add_parser("train-toy", help="train the toy segmentation pipeline")
    p.add_argument("--config", required=True, help="JSON pipeline + scene configuration")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--checkpoint", default=None, help="optional parameter checkpoint directory")
    p.set_defaults(fn=_cmd_train_toy)

    p = sub.add_parser("eval", help="score predicted labels against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate-m", help="sweep the group split m over the toy pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--m", required=True, help="comma-separated split values, e.g. 1,2,3,4")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_ablate_m)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DomainError as exc:
        print(f"pgrain: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"pgrain: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
