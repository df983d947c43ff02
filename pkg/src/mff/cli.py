"""``mff`` command line: batch commands over manifests.

Exit codes: 0 success, 1 validation error, 2 IO or format error, 3 numerical
non-convergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from mff.config import PipelineConfig, load_config
from mff.depth import DepthError, DepthFormatError, InpaintConvergenceError, load_depth, write_depth_png
from mff.evaluation import EvalError, build_eval_report, distance_points_stats, format_report, report_json, write_stats_csv
from mff.frustum import ConfigurationError, DetectionFormatError, read_detections
from mff.heads import AdapterSchemaError, read_adapter_predictions, write_frustum_bundle, write_predictions
from mff.openlabel import (
    ManifestError,
    OpenLabelError,
    OpenLabelParseError,
    OpenLabelSchemaError,
    PointCloudFormatError,
    build_manifest,
    load_manifest,
    save_manifest,
)
from mff import pipeline

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("mff")

_IO_ERRORS = (
    OSError,
    json.JSONDecodeError,
    DepthFormatError,
    PointCloudFormatError,
    OpenLabelParseError,
    OpenLabelSchemaError,
    DetectionFormatError,
    AdapterSchemaError,
    ManifestError,
)


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.camera:
        changes["camera"] = args.camera
    if args.lidar:
        changes["lidar"] = args.lidar
    if args.png_scale is not None:
        changes["depth"] = dataclasses.replace(cfg.depth, png_scale=args.png_scale)
    return cfg.replace(**changes) if changes else cfg


def _priors(args, manifest):
    if args.train_manifest:
        return pipeline.priors_for({"train": load_manifest(args.train_manifest)})
    return pipeline.priors_for({"train": manifest if manifest.split == "train" else None})


def _adapters(args, bundle=None):
    out = {}
    for route in ("short", "long"):
        path = getattr(args, f"{route}_preds")
        if path:
            out[route] = read_adapter_predictions(path, bundle)
    return out


# ---------------------------------------------------------------- commands


def cmd_ingest(args, cfg):
    manifests = build_manifest(
        args.root,
        args.splits,
        camera=cfg.camera,
        lidar=cfg.lidar,
        ignore_distortion=args.ignore_distortion,
        jobs=args.jobs,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, m in manifests.items():
        save_manifest(m, out / f"{split}.json")
        print(f"{split}: {len(m.frames)} frames, {sum(m.class_histogram.values())} paired labels")
    return EXIT_OK


def cmd_depth_gt(args, cfg):
    manifest = load_manifest(args.manifest)
    out = Path(args.out)

    def one(frame):
        sp, dn = pipeline.depth_ground_truth(frame, cfg, out)
        if args.png:
            write_depth_png(dn.with_suffix(".png"), load_depth(dn), cfg.depth.png_scale)
        return frame.frame_id

    for fid in pipeline._map(one, list(manifest.frames), args.jobs):
        print(f"{fid}: done")
    return EXIT_OK


def cmd_frustumize(args, cfg):
    manifest = load_manifest(args.manifest)
    detections = read_detections(args.detections)
    priors = _priors(args, manifest)
    results = pipeline.run_frames(manifest, detections, args.depth, cfg, priors, args.jobs, with_bev=True)
    entries = [
        (fr.frame_id, r.index, r.frustum, r.decision.route, *([r.bev] if r.bev is not None else []))
        for fr in results
        for r in fr.routed
    ]
    out = write_frustum_bundle(entries, args.out)
    log = pipeline.routing_log(results)
    pipeline.write_jsonl(out / "routing_log.jsonl", log)
    _print_routes(log)
    return EXIT_OK


def cmd_run(args, cfg):
    manifest = load_manifest(args.manifest)
    detections = read_detections(args.detections)
    priors = _priors(args, manifest)
    results = pipeline.run_frames(manifest, detections, args.depth, cfg, priors, args.jobs)
    preds = pipeline.predictions_from_results(results, cfg, _adapters(args, args.bundle))
    write_predictions(args.out, preds)
    log = pipeline.routing_log(results)
    if args.routing_log:
        pipeline.write_jsonl(args.routing_log, log)
    _print_routes(log)
    print(f"{len(preds)} predictions written to {args.out}")
    return EXIT_OK


def cmd_eval(args, cfg):
    manifest = load_manifest(args.manifest)
    preds = read_adapter_predictions(args.predictions, args.bundle) if args.predictions else None
    dets = read_detections(args.detections) if args.detections else None
    if preds is None and dets is None:
        raise EvalError("nothing to evaluate: pass --predictions and/or --detections")
    report = build_eval_report(manifest, predictions=preds, detections=dets, config=cfg.eval_config())
    text = format_report(report)
    if args.out:
        Path(args.out).write_text(report_json(report), encoding="utf-8")
    if args.text:
        Path(args.text).write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_stats(args, cfg):
    manifest = load_manifest(args.manifest)
    stats = distance_points_stats(manifest)
    write_stats_csv(args.out, stats)
    print(f"{sum(len(v) for v in stats.values())} rows written to {args.out}")
    if args.heatmap:
        if not (args.depth_pred and args.depth_gt):
            raise ConfigurationError("--heatmap needs --depth-pred and --depth-gt")
        pipeline.error_heatmap(args.depth_pred, manifest, args.depth_gt, args.heatmap)
        print(f"heatmap written to {args.heatmap}.png")
    return EXIT_OK


def cmd_synth(args, cfg):
    from mff.synth import make_scene, noisy_distances, write_scene, write_scene_detections

    s = cfg.synth
    seed = cfg.seed if args.seed is None else args.seed
    thresholds = sorted(set(cfg.fusion.route_thresholds_m.values()))
    scene = make_scene(seed, s.frames, s.objects_per_class, s.min_distance_m, s.max_distance_m, thresholds=thresholds)
    root = write_scene(scene, args.out)
    sigma = s.noise_sigma_m if args.noise_sigma is None else args.noise_sigma
    if sigma > 0:
        write_scene_detections(scene, root, noisy_distances(scene.detections(), sigma, seed))
    manifests = build_manifest(root, camera=cfg.camera, lidar=cfg.lidar)
    for split, m in manifests.items():
        save_manifest(m, root / f"manifest_{split}.json")
    print(f"scene with {sum(len(f.boxes) for f in scene.frames)} objects in {len(scene.frames)} frames at {root}")
    return EXIT_OK


def _print_routes(log):
    counts = {"short": 0, "long": 0, "error": 0}
    for rec in log:
        counts[rec["route"]] += 1
    print("routing: " + ", ".join(f"{k} {v}" for k, v in counts.items()))


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (defaults to the shipped config)")
    common.add_argument("--jobs", type=int, default=1, help="frame-level workers; 1 is bitwise deterministic")
    common.add_argument("--camera", help="camera stream name")
    common.add_argument("--lidar", help="lidar stream name")
    common.add_argument("--png-scale", type=float, default=None, help="meters per unit in 16-bit depth PNGs")
    common.add_argument("--ignore-distortion", action="store_true", help="accept cameras with lens distortion")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="OpenLABEL dataset root -> split manifests")
    s.add_argument("root")
    s.add_argument("--splits", help="split JSON (defaults to <root>/splits.json)")
    s.add_argument("--out", required=True, help="output directory for <split>.json manifests")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("depth-gt", parents=[common], help="projected + inpainted depth ground truth")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--png", action="store_true", help="also write 16-bit PNGs of the dense maps")
    s.set_defaults(func=cmd_depth_gt)

    for name, fn, text in (
        ("frustumize", cmd_frustumize, "frustum bundle + routing log"),
        ("run", cmd_run, "3D predictions from detections and depth"),
    ):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("manifest")
        s.add_argument("--detections", required=True, help="2.5D detections JSONL")
        s.add_argument("--depth", required=True, help="directory of <frame_id>.dmap depth maps")
        s.add_argument("--train-manifest", help="manifest for class priors (default: fallback dims)")
        s.add_argument("--out", required=True)
        if name == "run":
            s.add_argument("--short-preds", help="adapter predictions for the short route")
            s.add_argument("--long-preds", help="adapter predictions for the long route")
            s.add_argument("--bundle", help="frustum bundle for frustum-frame adapter records")
            s.add_argument("--routing-log", help="write the routing log JSONL here")
        s.set_defaults(func=fn)

    s = sub.add_parser("eval", parents=[common], help="AP / MAE report")
    s.add_argument("manifest")
    s.add_argument("--predictions", help="3D predictions JSONL")
    s.add_argument("--detections", help="2.5D detections JSONL")
    s.add_argument("--bundle", help="frustum bundle for frustum-frame records")
    s.add_argument("--out", help="report JSON path")
    s.add_argument("--text", help="text table path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", parents=[common], help="points-vs-distance CSV and depth error heatmap")
    s.add_argument("manifest")
    s.add_argument("--out", required=True, help="CSV path")
    s.add_argument("--depth-pred", help="predicted depth directory")
    s.add_argument("--depth-gt", help="ground-truth depth directory")
    s.add_argument("--heatmap", help="heatmap output prefix")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("synth", parents=[common], help="synthetic dataset with perfect depth and detections")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--noise-sigma", type=float, help="Gaussian distance noise on detections (m)")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        cfg = _config(args)
        return args.func(args, cfg)
    except InpaintConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _IO_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        # ConfigurationError, EvalError, PipelineError, GeometryError, ...
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
