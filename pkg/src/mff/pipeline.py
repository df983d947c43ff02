"""Batch pipeline over a manifest: depth ground truth, frustum extraction, routing and box prediction."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from mff.config import PipelineConfig
from mff.depth import DepthMap, inpaint_depth, load_depth, render_sparse_depth, save_depth, write_heatmap
from mff.frustum import (
    Detection25D,
    EmptyFrustumError,
    FrustumError,
    Route,
    extract_frustum,
    rasterize_bev,
    route,
    synthetic_frustum,
    to_frustum_frame,
)
from mff.geometry import CameraCalibration, GeometryError
from mff.heads import (
    ClassPriorTable,
    HeadPrediction,
    baseline_head,
    compute_class_priors,
    merge_and_nms,
    surface_offsets,
)
from mff.openlabel import DatasetManifest, FrameAnnotation, read_point_cloud

logger = logging.getLogger(__name__)


class PipelineError(ValueError):
    pass


@dataclass
class RoutedFrustum:
    index: int  # position of the detection in the frame's detection list
    frustum: object
    decision: object
    prediction: HeadPrediction | None = None
    bev: object = None


@dataclass
class FrameResult:
    frame_id: str
    routed: list = field(default_factory=list)
    log: list = field(default_factory=list)  # routing log records


def _frame_calibration(frame: FrameAnnotation, camera: str | None) -> CameraCalibration:
    cal = frame.camera_calibration(camera)
    if cal is None:
        raise PipelineError(f"frame {frame.frame_id}: no calibration for camera {camera or frame.camera!r}")
    return cal


def group_detections(detections, manifest: DatasetManifest) -> dict[str, list[Detection25D]]:
    known = set(manifest.frame_ids)
    unknown = sorted({d.frame_id for d in detections} - known)
    if unknown:
        raise PipelineError(f"detections reference unknown frames: {', '.join(unknown)}")
    out: dict[str, list[Detection25D]] = {fid: [] for fid in manifest.frame_ids}
    for d in detections:
        out[d.frame_id].append(d)
    return out


def load_frame_depth(depth_dir, frame_id: str) -> DepthMap:
    path = Path(depth_dir) / f"{frame_id}.dmap"
    if not path.exists():
        raise FileNotFoundError(f"no depth map for frame {frame_id}: {path}")
    return load_depth(path)


def process_frame(
    frame: FrameAnnotation,
    detections,
    depth: DepthMap,
    cfg: PipelineConfig,
    priors: ClassPriorTable,
    with_bev: bool = False,
) -> FrameResult:
    """Frustums, routing and baseline boxes for one frame's detections."""
    cal = _frame_calibration(frame, cfg.camera)
    k = cal.intrinsics
    depth.check_camera(k)
    fusion = cfg.fusion_config(surface_offsets(priors))
    cam_to_sensor = cal.camera_to_sensor
    res = FrameResult(frame.frame_id)
    for i, det in enumerate(detections):
        rec = {"frame_id": frame.frame_id, "detection": i, "class": det.class_id.value}
        try:
            try:
                f = extract_frustum(det, depth, k, cam_to_sensor, fusion)
            except EmptyFrustumError:
                f = synthetic_frustum(det, k, cam_to_sensor)
            decision = route(f, fusion)
            ff = to_frustum_frame(f)
            pred = baseline_head(ff, priors, decision.route, i)
            bev = None
            if with_bev and decision.route is Route.LONG:
                b = cfg.bev
                bev = rasterize_bev(ff, b.resolution_m, b.length_m, b.width_m)
        except (FrustumError, GeometryError, ValueError) as exc:
            rec.update(route="error", error=str(exc))
            res.log.append(rec)
            continue
        rec.update(
            route=decision.route.value,
            fused_distance=f.fused_distance,
            threshold=decision.threshold_used,
            points=len(f.points),
            synthetic=f.synthetic,
        )
        res.log.append(rec)
        res.routed.append(RoutedFrustum(i, ff, decision, pred, bev))
    return res


def _map(fn, items, jobs: int):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def run_frames(manifest, detections, depth_dir, cfg, priors, jobs: int = 1, with_bev: bool = False):
    grouped = group_detections(detections, manifest)
    frames = [f for f in manifest.frames if grouped[f.frame_id]]

    def one(frame):
        return process_frame(frame, grouped[frame.frame_id], load_frame_depth(depth_dir, frame.frame_id), cfg, priors, with_bev)

    return _map(one, frames, jobs)


def predictions_from_results(results, cfg: PipelineConfig, adapters=None) -> list[HeadPrediction]:
    """Baseline predictions split by route, optionally replaced per route by adapter files, then NMS."""
    short = [r.prediction for fr in results for r in fr.routed if r.decision.route is Route.SHORT]
    long_ = [r.prediction for fr in results for r in fr.routed if r.decision.route is Route.LONG]
    adapters = adapters or {}
    if "short" in adapters:
        short = [p for p in adapters["short"] if p.route is Route.SHORT]
    if "long" in adapters:
        long_ = [p for p in adapters["long"] if p.route is Route.LONG]
    merged = merge_and_nms(short, long_, cfg.nms_iou)
    return sorted(merged, key=lambda p: (p.frame_id, p.frustum_ref, p.route.value))


def routing_log(results) -> list[dict]:
    return [rec for fr in results for rec in fr.log]


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def priors_for(manifests: dict, fallback_manifest: DatasetManifest | None = None) -> ClassPriorTable:
    """Class priors from the train split (fallback dims for classes it lacks)."""
    train = manifests.get("train") if isinstance(manifests, dict) else manifests
    if train is None or not train.frames:
        train = fallback_manifest or DatasetManifest((), "train", "")
    return compute_class_priors(train)


# ---------------------------------------------------------------- depth ground truth


def _guide(frame: FrameAnnotation, shape) -> np.ndarray | None:
    if frame.image_path is None:
        return None
    img = np.asarray(Image.open(frame.image_path).convert("L"), dtype=np.float64) / 255.0
    if img.shape != shape:
        raise PipelineError(f"frame {frame.frame_id}: image size {img.shape} does not match camera {shape}")
    return img


def depth_ground_truth(frame: FrameAnnotation, cfg: PipelineConfig, out_dir) -> tuple[Path, Path]:
    """Project the frame's cloud into the camera and inpaint it; writes sparse and dense DMAPs."""
    cal = _frame_calibration(frame, cfg.camera)
    if frame.cloud_path is None:
        raise PipelineError(f"frame {frame.frame_id}: no point cloud")
    cloud = read_point_cloud(frame.cloud_path)
    sparse = render_sparse_depth(cloud, cal.sensor_to_camera, cal.intrinsics)
    dense = inpaint_depth(sparse, _guide(frame, sparse.values.shape), cfg.inpaint_config())
    out = Path(out_dir)
    (out / "sparse").mkdir(parents=True, exist_ok=True)
    (out / "dense").mkdir(parents=True, exist_ok=True)
    sp = out / "sparse" / f"{frame.frame_id}.dmap"
    dn = out / "dense" / f"{frame.frame_id}.dmap"
    save_depth(sp, sparse)
    save_depth(dn, dense)
    return sp, dn


def error_heatmap(pred_dir, manifest: DatasetManifest, gt_dir, prefix) -> None:
    """Aggregate normalized depth error over a manifest's frames into a heatmap pair."""
    from mff.depth import aggregate_error_heatmap, depth_errors

    reports = []
    for f in manifest.frames:
        p = Path(pred_dir) / f"{f.frame_id}.dmap"
        g = Path(gt_dir) / f"{f.frame_id}.dmap"
        if p.exists() and g.exists():
            reports.append(depth_errors(load_depth(p), load_depth(g)))
    if not reports:
        raise PipelineError("no frames with both predicted and ground-truth depth")
    write_heatmap(prefix, aggregate_error_heatmap(reports))
