"""Frustums from depth maps and 2.5D detections: distance fusion, routing and BEV rasters.

A frustum's *fused distance* is a weighted sum of the pseudo-cloud centroid's
forward (sensor x) coordinate and the detector's distance estimate. The fused
centre is ``(fused_distance, centroid lateral)``; its bearing is the frustum
azimuth and its horizontal range is the forward coordinate of that centre once
the cloud is rotated into the frustum frame.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from mff import kernels
from mff.depth import DepthMap
from mff.geometry import (
    EVAL_CLASSES,
    Box2D,
    CameraIntrinsics,
    ObjectClass,
    PointCloud,
    RigidTransform,
    backproject_pixels,
    frustum_frame_for,
    invert,
    transform_points,
)

MAX_DISTANCE_M = 250.0
DEFAULT_ROUTE_THRESHOLD_M = 100.0
#: per-class thresholds carried over from the KITTI-era dual-head detector
KITTI_ROUTE_THRESHOLDS_M = {ObjectClass.PERSON: 60.0, ObjectClass.ROAD_VEHICLE: 75.0}


class FrustumError(ValueError):
    pass


class EmptyFrustumError(FrustumError):
    pass


class FrustumStateError(FrustumError):
    pass


class ConfigurationError(ValueError):
    pass


class Route(str, enum.Enum):
    SHORT = "short"
    LONG = "long"


class FrameTag(str, enum.Enum):
    SENSOR = "sensor"
    FRUSTUM = "frustum"


@dataclass(frozen=True)
class Detection25D:
    box2d: Box2D
    class_id: ObjectClass
    confidence: float
    distance_m: float
    frame_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "class_id", ObjectClass.parse(self.class_id))
        if not (0.0 <= self.confidence <= 1.0):
            raise FrustumError(f"confidence {self.confidence} outside [0, 1]")
        if not (0.0 <= self.distance_m <= MAX_DISTANCE_M):
            raise FrustumError(f"distance {self.distance_m} m outside [0, {MAX_DISTANCE_M:g}]")


def _default_thresholds():
    return {c: DEFAULT_ROUTE_THRESHOLD_M for c in EVAL_CLASSES}


@dataclass(frozen=True)
class FusionConfig:
    """Distance fusion and routing parameters.

    ``surface_offsets`` (meters, per class, default empty) is added to the
    centroid's forward coordinate before fusion. Pseudo-clouds only sample
    the sensor-facing surface, so the centroid sits in front of the object
    centre; an offset of half the object's extent along the ray removes that bias.
    """

    w: float = 0.5
    thresholds: dict = field(default_factory=_default_thresholds)
    centroid_statistic: str = "median"
    trim_fraction: float = 0.0
    surface_offsets: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.w <= 1.0):
            raise ConfigurationError(f"fusion weight w={self.w} outside [0, 1]")
        if self.centroid_statistic not in ("mean", "median"):
            raise ConfigurationError(f"unknown centroid statistic {self.centroid_statistic!r}")
        if not (0.0 <= self.trim_fraction < 0.25):
            raise ConfigurationError(f"trim_fraction {self.trim_fraction} outside [0, 0.25)")
        thr = {ObjectClass.parse(k): float(v) for k, v in self.thresholds.items()}
        missing = [c.value for c in EVAL_CLASSES if c not in thr]
        if missing:
            raise ConfigurationError(f"no route threshold for classes {missing}")
        object.__setattr__(self, "thresholds", thr)
        object.__setattr__(
            self, "surface_offsets", {ObjectClass.parse(k): float(v) for k, v in self.surface_offsets.items()}
        )

    @classmethod
    def kitti_profile(cls, **kw) -> FusionConfig:
        thr = _default_thresholds()
        thr.update(KITTI_ROUTE_THRESHOLDS_M)
        return cls(thresholds=thr, **kw)


@dataclass(frozen=True)
class Frustum:
    detection: Detection25D
    points: PointCloud
    centroid_distance: float
    fused_distance: float
    azimuth: float
    frame_tag: FrameTag = FrameTag.SENSOR
    centroid_lateral: float = 0.0
    synthetic: bool = False

    @property
    def fused_range(self) -> float:
        """Forward coordinate of the fused centre in the frustum frame."""
        return math.hypot(self.fused_distance, self.centroid_lateral)

    @property
    def class_id(self) -> ObjectClass:
        return self.detection.class_id


@dataclass(frozen=True)
class RoutingDecision:
    route: Route
    fused_distance: float
    threshold_used: float


def fuse_distance(centroid_distance: float, detector_distance: float, w: float) -> float:
    return w * centroid_distance + (1.0 - w) * detector_distance


# ---------------------------------------------------------------- pseudo-clouds


def backproject_depth_map(
    d: DepthMap, k: CameraIntrinsics, camera_to_sensor: RigidTransform, stride: int = 1
) -> PointCloud:
    """Back-project every ``stride``-th valid pixel (rows and columns) to the sensor frame.

    Points come out in row-major pixel order.
    """
    if stride < 1:
        raise FrustumError("stride must be >= 1")
    sub = d.values[::stride, ::stride]
    rr, cc = np.nonzero(np.isfinite(sub))
    if rr.size == 0:
        return PointCloud.empty()
    rows, cols = rr * stride, cc * stride
    cam = backproject_pixels(cols, rows, sub[rr, cc], k)
    return PointCloud(camera_to_sensor.apply(cam))


def _box_pixels(box: Box2D, height: int, width: int):
    c0 = max(math.ceil(box.x1), 0)
    c1 = min(math.floor(box.x2), width - 1)
    r0 = max(math.ceil(box.y1), 0)
    r1 = min(math.floor(box.y2), height - 1)
    return r0, r1, c0, c1


def _statistic(values: np.ndarray, name: str) -> float:
    return float(np.median(values) if name == "median" else np.mean(values))


def extract_frustum(
    det: Detection25D,
    d: DepthMap,
    k: CameraIntrinsics,
    camera_to_sensor: RigidTransform,
    cfg: FusionConfig = FusionConfig(),
) -> Frustum:
    """Pseudo-cloud inside the detection box plus its fused centre.

    Pixels whose centres lie inside the (closed) box are back-projected. With
    ``trim_fraction > 0`` the nearest and farthest ``floor(trim * n)`` points
    by forward distance are discarded first.
    """
    if d.values.shape != (k.height, k.width):
        raise FrustumError("depth map does not match camera size")
    b = det.box2d
    if b.x1 < 0 or b.y1 < 0 or b.x2 > k.width or b.y2 > k.height:
        raise FrustumError(f"detection box {b.as_tuple()} exceeds the image")
    r0, r1, c0, c1 = _box_pixels(b, k.height, k.width)
    if r0 > r1 or c0 > c1:
        raise EmptyFrustumError("detection box contains no pixel centre")
    patch = d.values[r0 : r1 + 1, c0 : c1 + 1]
    rr, cc = np.nonzero(np.isfinite(patch))
    if rr.size == 0:
        raise EmptyFrustumError(f"no valid depth inside box {b.as_tuple()}")
    cam = backproject_pixels(cc + c0, rr + r0, patch[rr, cc], k)
    pts = camera_to_sensor.apply(cam)

    if cfg.trim_fraction > 0:
        n_trim = int(math.floor(cfg.trim_fraction * pts.shape[0]))
        if n_trim:
            order = np.argsort(pts[:, 0], kind="stable")
            pts = pts[np.sort(order[n_trim : pts.shape[0] - n_trim])]

    centroid_x = _statistic(pts[:, 0], cfg.centroid_statistic)
    centroid_y = _statistic(pts[:, 1], cfg.centroid_statistic)
    offset = cfg.surface_offsets.get(det.class_id, 0.0)
    if offset:
        # push the centroid away from the sensor along its own bearing
        rng = math.hypot(centroid_x, centroid_y)
        if rng > 0:
            scale = (rng + offset) / rng
            centroid_x, centroid_y = centroid_x * scale, centroid_y * scale
    fused = fuse_distance(centroid_x, det.distance_m, cfg.w)
    return Frustum(
        detection=det,
        points=PointCloud(pts),
        centroid_distance=centroid_x,
        fused_distance=fused,
        azimuth=math.atan2(centroid_y, fused),
        centroid_lateral=centroid_y,
    )


def synthetic_frustum(
    det: Detection25D, k: CameraIntrinsics, camera_to_sensor: RigidTransform
) -> Frustum:
    """Fallback when a box holds no valid depth: one point on the box-centre ray
    at forward distance ``det.distance_m``, flagged ``synthetic``."""
    u, v = det.box2d.center
    ray = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    r = camera_to_sensor.rotation @ ray
    t = camera_to_sensor.translation
    s = (det.distance_m - t[0]) / r[0] if r[0] > 1e-12 else det.distance_m
    s = max(s, 1e-6)
    p = t + s * r
    return Frustum(
        detection=det,
        points=PointCloud(p[None, :]),
        centroid_distance=det.distance_m,
        fused_distance=det.distance_m,
        azimuth=math.atan2(p[1], det.distance_m),
        centroid_lateral=float(p[1]),
        synthetic=True,
    )


def route(f: Frustum, cfg: FusionConfig = FusionConfig()) -> RoutingDecision:
    """Long route iff the fused distance is strictly above the class threshold."""
    try:
        thr = cfg.thresholds[f.class_id]
    except KeyError:
        raise ConfigurationError(f"no route threshold configured for class {f.class_id.value!r}") from None
    r = Route.LONG if f.fused_distance > thr else Route.SHORT
    return RoutingDecision(r, f.fused_distance, thr)


def to_frustum_frame(f: Frustum) -> Frustum:
    if f.frame_tag is not FrameTag.SENSOR:
        raise FrustumStateError("frustum is already in the frustum frame")
    pts = transform_points(frustum_frame_for(f.azimuth), f.points)
    return replace(f, points=pts, frame_tag=FrameTag.FRUSTUM)


def from_frustum_frame(f: Frustum) -> Frustum:
    if f.frame_tag is not FrameTag.FRUSTUM:
        raise FrustumStateError("frustum is already in the sensor frame")
    pts = transform_points(invert(frustum_frame_for(f.azimuth)), f.points)
    return replace(f, points=pts, frame_tag=FrameTag.SENSOR)


# ---------------------------------------------------------------- BEV


BEV_CHANNELS = ("occupancy", "density", "max_height")


@dataclass
class BevGrid:
    """``cells[ix, iy, c]`` with ``ix`` along the frustum's +x and ``iy`` along +y."""

    cells: np.ndarray
    class_prior: np.ndarray
    resolution: float
    window: tuple[float, float, float]  # (x0, x1, half_width)
    dropped: int = 0

    @property
    def occupancy(self) -> np.ndarray:
        return self.cells[..., 0]

    @property
    def density(self) -> np.ndarray:
        return self.cells[..., 1]

    @property
    def max_height(self) -> np.ndarray:
        return self.cells[..., 2]

    def sidecar(self) -> dict:
        x0, x1, hw = self.window
        return {
            "resolution": self.resolution,
            "window": {"x": [x0, x1], "y": [-hw, hw]},
            "class_prior": self.class_prior.astype(int).tolist(),
            "channels": list(BEV_CHANNELS),
            "dropped": self.dropped,
        }


def one_hot(class_id: ObjectClass) -> np.ndarray:
    v = np.zeros(len(EVAL_CLASSES))
    if class_id in EVAL_CLASSES:
        v[class_id.index] = 1.0
    return v


def rasterize_bev(f: Frustum, resolution: float = 0.25, length: float = 48.0, width: float = 48.0) -> BevGrid:
    """Splat a frustum-frame cloud onto a window centred on the fused centre.

    Window: ``x in [r - L/2, r + L/2]``, ``y in [-W/2, W/2]`` with ``r`` the fused
    range. Points on the far edges fall into the last cell; points outside
    the window are dropped and counted. Empty cells carry max_height 0.
    """
    if f.frame_tag is not FrameTag.FRUSTUM:
        raise FrustumStateError("rasterize_bev needs a frustum-frame cloud")
    if not resolution > 0:
        raise FrustumError("resolution must be positive")
    nx = int(round(length / resolution))
    ny = int(round(width / resolution))
    x0 = f.fused_range - length / 2.0
    x1 = f.fused_range + length / 2.0
    hw = width / 2.0
    p = f.points.points
    inside = (p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= -hw) & (p[:, 1] <= hw)
    q = p[inside]
    ix = np.minimum(np.floor((q[:, 0] - x0) / resolution).astype(np.int64), nx - 1)
    iy = np.minimum(np.floor((q[:, 1] + hw) / resolution).astype(np.int64), ny - 1)
    ix = np.maximum(ix, 0)
    iy = np.maximum(iy, 0)
    density, max_h = kernels.bev_scatter(ix, iy, q[:, 2], nx, ny)
    cells = np.stack([(density > 0).astype(np.float64), density.astype(np.float64), max_h], axis=-1)
    return BevGrid(cells, one_hot(f.class_id), resolution, (x0, x1, hw), int(len(p) - len(q)))


def write_bev(prefix, grid: BevGrid) -> list[Path]:
    """One DMAP per channel (``<prefix>.<channel>.dmap``) plus ``<prefix>.json``."""
    from mff.depth import write_dmap

    prefix = Path(prefix)
    written = []
    for i, name in enumerate(BEV_CHANNELS):
        path = prefix.parent / f"{prefix.name}.{name}.dmap"
        write_dmap(path, grid.cells[..., i])
        written.append(path)
    side = prefix.parent / f"{prefix.name}.json"
    side.write_text(json.dumps(grid.sidecar(), sort_keys=True) + "\n")
    written.append(side)
    return written


# ---------------------------------------------------------------- distance utilities


def normalize_distance(d: float) -> float:
    if not (0.0 <= d <= MAX_DISTANCE_M):
        raise FrustumError(f"distance {d} outside [0, {MAX_DISTANCE_M:g}] m")
    return d / MAX_DISTANCE_M


def denormalize_distance(n: float) -> float:
    if not (0.0 <= n <= 1.0):
        raise FrustumError(f"normalized distance {n} outside [0, 1]")
    return n * MAX_DISTANCE_M


def huber(residual, delta: float = 1.0):
    if not delta > 0:
        raise ValueError("delta must be positive")
    r = np.abs(np.asarray(residual, dtype=np.float64))
    out = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- detections IO


class DetectionFormatError(ValueError):
    def __init__(self, msg: str, line: int, field_name: str | None = None):
        where = f"line {line}" + (f", field {field_name!r}" if field_name else "")
        super().__init__(f"{where}: {msg}")
        self.line = line
        self.field = field_name


_DET_FIELDS = ("frame_id", "class", "x1", "y1", "x2", "y2", "confidence", "distance_m")


def detection_to_json(det: Detection25D) -> dict:
    b = det.box2d
    return {
        "frame_id": det.frame_id,
        "class": det.class_id.value,
        "x1": b.x1,
        "y1": b.y1,
        "x2": b.x2,
        "y2": b.y2,
        "confidence": det.confidence,
        "distance_m": det.distance_m,
    }


def write_detections(path, detections) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for det in detections:
            fh.write(json.dumps(detection_to_json(det), sort_keys=True) + "\n")


def read_detections(path) -> list[Detection25D]:
    """Read 2.5D detections from JSON Lines; blank lines are skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DetectionFormatError(exc.msg, lineno) from None
            for name in _DET_FIELDS:
                if name not in rec:
                    raise DetectionFormatError("missing field", lineno, name)
            try:
                box = Box2D(float(rec["x1"]), float(rec["y1"]), float(rec["x2"]), float(rec["y2"]))
            except (TypeError, ValueError) as exc:
                raise DetectionFormatError(str(exc), lineno, "x1") from None
            try:
                cls = ObjectClass.parse(rec["class"])
            except ValueError as exc:
                raise DetectionFormatError(str(exc), lineno, "class") from None
            for name in ("confidence", "distance_m"):
                try:
                    float(rec[name])
                except (TypeError, ValueError):
                    raise DetectionFormatError("not a number", lineno, name) from None
            try:
                out.append(
                    Detection25D(box, cls, float(rec["confidence"]), float(rec["distance_m"]), str(rec["frame_id"]))
                )
            except FrustumError as exc:
                name = "confidence" if "confidence" in str(exc) else "distance_m"
                raise DetectionFormatError(str(exc), lineno, name) from None
    return out
