"""Synthetic scenes: cuboids on a flat ground, analytic depth, and exact labels.

Every object faces the camera (heading = bearing of its centre), sits on the
ground plane and straddles the camera's height, so only its front face is
visible. Object boxes never overlap in the image, which keeps each 2D box
free of other objects' pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from mff.depth import DepthMap, save_depth
from mff.frustum import DEFAULT_ROUTE_THRESHOLD_M, MAX_DISTANCE_M, Detection25D, write_detections
from mff.geometry import (
    EVAL_CLASSES,
    Box2D,
    Box3D,
    CameraCalibration,
    CameraIntrinsics,
    ObjectClass,
    PointCloud,
    corners_of,
    project_points,
)
from mff.heads import FALLBACK_DIMS
from mff.openlabel import FrameAnnotation, ObjectLabel, to_openlabel, write_point_cloud

SEQUENCE = "synth"
CAMERA = "cam_synth"
LIDAR = "lidar_synth"
CAMERA_HEIGHT_M = 1.2
GROUND_MAX_M = 600.0
MAX_AZIMUTH = 0.35
BOX_GAP_PX = 4.0
ROUTE_MARGIN_M = 1.5
CLOUD_STRIDE = 6
LIDAR_RANGE_M = MAX_DISTANCE_M

# closest placement keeping the whole object inside the default image
MIN_DISTANCE_M = {
    ObjectClass.PERSON: 10.0,
    ObjectClass.ROAD_VEHICLE: 12.0,
    ObjectClass.BUFFER_STOP: 15.0,
    ObjectClass.SIGNAL_POLE: 12.0,
    ObjectClass.CATENARY_POLE: 23.0,
}
SHADES = {
    ObjectClass.PERSON: 40,
    ObjectClass.ROAD_VEHICLE: 160,
    ObjectClass.BUFFER_STOP: 120,
    ObjectClass.CATENARY_POLE: 70,
    ObjectClass.SIGNAL_POLE: 220,
}
SKY_SHADE, GROUND_SHADE = 250, 95


def default_camera() -> CameraIntrinsics:
    return CameraIntrinsics(fx=2000.0, fy=2000.0, cx=960.0, cy=540.0, width=1920, height=1080)


@dataclass
class SynthFrame:
    frame_id: str
    boxes: list  # Box3D
    boxes2d: list  # Box2D
    depth: DepthMap
    image: np.ndarray  # uint8 guide image
    cloud: PointCloud

    def detections(self, distances=None, confidence: float = 1.0) -> list[Detection25D]:
        dist = [b.center[0] for b in self.boxes] if distances is None else distances
        return [
            Detection25D(b2, b3.class_id, confidence, float(d), self.frame_id)
            for b2, b3, d in zip(self.boxes2d, self.boxes, dist)
        ]


@dataclass
class SynthScene:
    intrinsics: CameraIntrinsics
    frames: list
    splits: dict

    @property
    def calibration(self) -> CameraCalibration:
        return CameraCalibration(self.intrinsics)

    def frame(self, frame_id: str) -> SynthFrame:
        return next(f for f in self.frames if f.frame_id == frame_id)

    def detections(self) -> list[Detection25D]:
        return [d for f in self.frames for d in f.detections()]


# ---------------------------------------------------------------- placement


def projected_box(box: Box3D, k: CameraIntrinsics) -> Box2D | None:
    """Tight image box of the cuboid, or ``None`` if any corner leaves the image."""
    from mff.geometry import SENSOR_TO_OPTICAL

    uvz = project_points(SENSOR_TO_OPTICAL.apply(corners_of(box)), k)
    if not np.all(np.isfinite(uvz)):
        return None
    u, v = uvz[:, 0], uvz[:, 1]
    if u.min() < 0 or v.min() < 0 or u.max() > k.width or v.max() > k.height:
        return None
    return Box2D(float(u.min()), float(v.min()), float(u.max()), float(v.max()))


def _sample_distances(rng, cls, n, lo, hi, thresholds):
    lo = max(lo, MIN_DISTANCE_M[cls])
    edges = np.linspace(lo, hi, n + 1)
    out = []
    for a, b in zip(edges, edges[1:]):
        for _ in range(1000):
            x = float(rng.uniform(a, b))
            if all(abs(x - t) >= ROUTE_MARGIN_M for t in thresholds):
                break
        out.append(x)
    return out


def _overlaps(b: Box2D, others, gap: float) -> bool:
    return any(
        b.x1 < o.x2 + gap and o.x1 < b.x2 + gap and b.y1 < o.y2 + gap and o.y1 < b.y2 + gap for o in others
    )


def place_objects(rng, k: CameraIntrinsics, objects_per_class: int, lo: float, hi: float, thresholds=None):
    """Draw a non-overlapping layout; returns matching lists of Box3D and Box2D.

    Distances are stratified per class over ``[lo, hi]`` and kept clear of the
    route thresholds; nearest objects are placed first.
    """
    thresholds = [DEFAULT_ROUTE_THRESHOLD_M] if thresholds is None else list(thresholds)
    wanted = [
        (x, cls)
        for cls in EVAL_CLASSES
        for x in _sample_distances(rng, cls, objects_per_class, lo, hi, thresholds)
    ]
    wanted.sort(key=lambda t: (t[0], t[1].value))
    boxes, boxes2d = [], []
    for x, cls in wanted:
        l, w, h = FALLBACK_DIMS[cls]
        for _ in range(2000):
            az = float(rng.uniform(-MAX_AZIMUTH, MAX_AZIMUTH))
            box = Box3D((x, x * math.tan(az), -CAMERA_HEIGHT_M + h / 2.0), (l, w, h), az, cls)
            b2 = projected_box(box, k)
            if b2 is not None and not _overlaps(b2, boxes2d, BOX_GAP_PX):
                break
        else:
            raise RuntimeError(f"could not place a {cls.value} at x={x:.1f} m")
        boxes.append(box)
        boxes2d.append(b2)
    return boxes, boxes2d


# ---------------------------------------------------------------- rendering


def _pixel_rays(k: CameraIntrinsics, rows, cols):
    """Sensor-frame ray directions scaled so the forward component is 1."""
    return -(cols - k.cx) / k.fx, -(rows - k.cy) / k.fy


def _ray_box_depth(box: Box3D, ry, rz):
    """Entry parameter (== forward depth) of rays from the origin into ``box``; inf on a miss."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    ox, oy, oz = -np.asarray(box.center, dtype=np.float64)
    # rotate origin and direction into the box frame
    o = (c * ox + s * oy, -s * ox + c * oy, oz)
    d = (c * 1.0 + s * ry, -s * 1.0 + c * ry, rz)
    t_near = np.full(np.shape(ry), -np.inf)
    t_far = np.full(np.shape(ry), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for oi, di, half in zip(o, d, np.asarray(box.dims) / 2.0):
            di = np.broadcast_to(di, np.shape(ry))
            t1 = (-half - oi) / di
            t2 = (half - oi) / di
            t_near = np.maximum(t_near, np.minimum(t1, t2))
            t_far = np.minimum(t_far, np.maximum(t1, t2))
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def render_frame(boxes, boxes2d, k: CameraIntrinsics):
    """Analytic z-depth and guide image for a layout; sky pixels are NaN."""
    rows, cols = np.mgrid[0 : k.height, 0 : k.width].astype(np.float64)
    _, rz = _pixel_rays(k, rows, cols)
    depth = np.full((k.height, k.width), np.inf)
    below = rz < 0
    depth[below] = CAMERA_HEIGHT_M / -rz[below]
    depth[depth > GROUND_MAX_M] = np.inf
    image = np.where(np.isfinite(depth), GROUND_SHADE, SKY_SHADE).astype(np.uint8)
    for box, b2 in zip(boxes, boxes2d):
        r0, r1 = max(int(math.floor(b2.y1)) - 1, 0), min(int(math.ceil(b2.y2)) + 1, k.height - 1)
        c0, c1 = max(int(math.floor(b2.x1)) - 1, 0), min(int(math.ceil(b2.x2)) + 1, k.width - 1)
        rr, cc = np.mgrid[r0 : r1 + 1, c0 : c1 + 1].astype(np.float64)
        ry, rz = _pixel_rays(k, rr, cc)
        t = _ray_box_depth(box, ry, rz)
        patch = depth[r0 : r1 + 1, c0 : c1 + 1]
        closer = t < patch
        patch[closer] = t[closer]
        image[r0 : r1 + 1, c0 : c1 + 1][closer] = SHADES[box.class_id]
    depth[~np.isfinite(depth)] = np.nan
    return DepthMap(depth), image


def lidar_cloud(depth: DepthMap, k: CameraIntrinsics, stride: int = CLOUD_STRIDE) -> PointCloud:
    """Regular-grid samples of the depth map within the sensor range, as a sensor-frame cloud."""
    from mff.frustum import backproject_depth_map
    from mff.geometry import SENSOR_TO_OPTICAL, invert

    cloud = backproject_depth_map(depth, k, invert(SENSOR_TO_OPTICAL), stride)
    keep = np.linalg.norm(cloud.points, axis=1) <= LIDAR_RANGE_M
    return PointCloud(cloud.points[keep])


def make_scene(
    seed: int = 0,
    frames: int = 2,
    objects_per_class: int = 4,
    min_distance_m: float = 10.0,
    max_distance_m: float = 240.0,
    intrinsics: CameraIntrinsics | None = None,
    thresholds=None,
) -> SynthScene:
    """Build a scene; the first frame is the train split, the rest the test split."""
    k = intrinsics or default_camera()
    rng = np.random.default_rng(seed)
    out = []
    for i in range(frames):
        boxes, boxes2d = place_objects(rng, k, objects_per_class, min_distance_m, max_distance_m, thresholds)
        depth, image = render_frame(boxes, boxes2d, k)
        out.append(SynthFrame(f"{SEQUENCE}_{i}", boxes, boxes2d, depth, image, lidar_cloud(depth, k)))
    ids = [f.frame_id for f in out]
    splits = {"train": ids[:1], "val": [], "test": ids[1:]} if frames > 1 else {"train": [], "val": [], "test": ids}
    return SynthScene(k, out, splits)


def noisy_distances(detections, sigma: float, seed: int = 0) -> list[Detection25D]:
    """Add ``sigma``-scaled Gaussian noise to detector distances, clipped to the valid span.

    The underlying standard-normal draws depend only on ``seed`` and the
    detection count, so studies at different ``sigma`` share them.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    z = np.random.default_rng(seed).standard_normal(len(detections))
    return [
        Detection25D(d.box2d, d.class_id, d.confidence, float(np.clip(d.distance_m + sigma * zi, 0.0, MAX_DISTANCE_M)), d.frame_id)
        for d, zi in zip(detections, z)
    ]


# ---------------------------------------------------------------- writing


def write_scene(scene: SynthScene, root) -> Path:
    """Lay the scene out as a dataset root.

    ``labels/synth.json`` (OpenLABEL), ``splits.json``, ``clouds/``, ``images/``,
    dense depth in ``depth/`` and perfect detections in ``detections.jsonl``.
    """
    root = Path(root)
    for sub in ("labels", "clouds", "images", "depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    calib = {CAMERA: scene.calibration}
    annotations = []
    for f in scene.frames:
        cloud_rel = f"clouds/{f.frame_id}.pclb"
        image_rel = f"images/{f.frame_id}.png"
        write_point_cloud(root / cloud_rel, f.cloud)
        Image.fromarray(f.image).save(root / image_rel)
        save_depth(root / "depth" / f"{f.frame_id}.dmap", f.depth)
        labels = tuple(
            ObjectLabel(f"{f.frame_id}_obj{i:03d}", b3.class_id, b2, b3, CAMERA, b3.class_id.value)
            for i, (b3, b2) in enumerate(zip(f.boxes, f.boxes2d))
        )
        annotations.append(FrameAnnotation(f.frame_id, labels, calib, cloud_rel, image_rel, CAMERA, LIDAR))
    doc = to_openlabel(annotations, sequence=SEQUENCE)
    (root / "labels" / f"{SEQUENCE}.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    (root / "splits.json").write_text(json.dumps(scene.splits, indent=1, sort_keys=True) + "\n")
    write_scene_detections(scene, root, scene.detections())
    return root


def write_scene_detections(scene: SynthScene, root, detections) -> None:
    """All detections in ``detections.jsonl`` plus one ``detections_<split>.jsonl`` per non-empty split."""
    root = Path(root)
    write_detections(root / "detections.jsonl", detections)
    for split, ids in scene.splits.items():
        if ids:
            keep = set(ids)
            write_detections(root / f"detections_{split}.jsonl", [d for d in detections if d.frame_id in keep])
