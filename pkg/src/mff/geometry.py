"""Frames, pinhole projection, rigid transforms and yaw-only 3D boxes.

Frame conventions
-----------------
Sensor / world frame: x forward, y left, z up.
Camera (optical) frame: z forward, x right, y down.
Image: u along columns, v along rows; integer coordinates are pixel centres.

The "distance" of an object is its sensor-frame x coordinate.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-9
# containment slack so boundary points survive rotation round-off
_INSIDE_EPS = 1e-9


class GeometryError(ValueError):
    """Raised when an operation receives geometrically invalid input."""


class ObjectClass(str, enum.Enum):
    PERSON = "person"
    ROAD_VEHICLE = "road_vehicle"
    BUFFER_STOP = "buffer_stop"
    CATENARY_POLE = "catenary_pole"
    SIGNAL_POLE = "signal_pole"
    OTHER = "other"

    @property
    def index(self) -> int:
        return EVAL_CLASSES.index(self)

    @classmethod
    def parse(cls, name: str | ObjectClass) -> ObjectClass:
        if isinstance(name, ObjectClass):
            return name
        try:
            return cls(name.strip().lower().replace(" ", "_"))
        except ValueError:
            raise GeometryError(f"unknown object class {name!r}") from None


#: classes that take part in evaluation, in one-hot order
EVAL_CLASSES: tuple[ObjectClass, ...] = (
    ObjectClass.PERSON,
    ObjectClass.ROAD_VEHICLE,
    ObjectClass.BUFFER_STOP,
    ObjectClass.CATENARY_POLE,
    ObjectClass.SIGNAL_POLE,
)


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.pi - math.fmod(math.pi - a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


class RigidTransform:
    """Proper rigid motion ``p -> R p + t``. Immutable."""

    __slots__ = ("_rotation", "_translation")

    def __init__(self, rotation=None, translation=None, *, check: bool = True):
        r = np.eye(3) if rotation is None else np.array(rotation, dtype=np.float64)
        t = np.zeros(3) if translation is None else np.array(translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise GeometryError("rotation must be 3x3 and translation a 3-vector")
        if check:
            if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
                raise GeometryError("transform contains non-finite values")
            if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
                raise GeometryError("rotation is not orthonormal")
            if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
                raise GeometryError("rotation is not proper (det != +1)")
        r.setflags(write=False)
        t.setflags(write=False)
        self._rotation = r
        self._translation = t

    @property
    def rotation(self) -> np.ndarray:
        return self._rotation

    @property
    def translation(self) -> np.ndarray:
        return self._translation

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> RigidTransform:
        return cls(None, (x, y, z))

    @classmethod
    def from_yaw(cls, yaw: float, translation=None) -> RigidTransform:
        c, s = math.cos(yaw), math.sin(yaw)
        return cls([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], translation)

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        if np.max(np.abs(m[3] - [0.0, 0.0, 0.0, 1.0])) > _ORTHO_TOL:
            raise GeometryError("bottom row of a rigid 4x4 must be (0, 0, 0, 1)")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self._rotation
        m[:3, 3] = self._translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self._rotation.T + self._translation

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self._rotation, other._rotation) and np.array_equal(
            self._translation, other._translation
        )

    def __hash__(self):
        return hash((self._rotation.tobytes(), self._translation.tobytes()))

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        return np.allclose(self._rotation, other._rotation, atol=atol, rtol=0) and np.allclose(
            self._translation, other._translation, atol=atol, rtol=0
        )

    def __repr__(self):
        return f"RigidTransform(rotation={self._rotation.tolist()}, translation={self._translation.tolist()})"


def compose(t1: RigidTransform, t2: RigidTransform) -> RigidTransform:
    """Return ``t1 o t2``: apply ``t2`` first, then ``t1``."""
    r = t1.rotation @ t2.rotation
    t = t1.rotation @ t2.translation + t1.translation
    # re-orthonormalise would hide upstream errors; skip the check to allow round-off drift
    return RigidTransform(r, t, check=False)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation, check=False)


# sensor (x fwd, y left, z up) -> optical camera (x right, y down, z fwd)
SENSOR_TO_OPTICAL = RigidTransform([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image box in pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite box coordinates {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise GeometryError(f"degenerate 2D box {vals}")

    @classmethod
    def clipped(cls, x1: float, y1: float, x2: float, y2: float, width: int, height: int) -> Box2D:
        """Build a box clipped to the ``[0, width] x [0, height]`` image rectangle."""
        return cls(
            min(max(x1, 0.0), width),
            min(max(y1, 0.0), height),
            min(max(x2, 0.0), width),
            min(max(y2, 0.0), height),
        )

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> Box2D:
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Box3D:
    """Yaw-only oriented cuboid in the sensor frame.

    ``dims`` is ``(l, w, h)``: extents along the box's heading, lateral and up axes.
    """

    center: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float
    class_id: ObjectClass = ObjectClass.OTHER

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        dims = tuple(float(v) for v in self.dims)
        if len(center) != 3 or len(dims) != 3:
            raise GeometryError("center and dims must have three components")
        if not all(math.isfinite(v) for v in center + dims + (self.yaw,)):
            raise GeometryError("non-finite box parameters")
        if not all(d > 0 for d in dims):
            raise GeometryError(f"box dimensions must be positive, got {dims}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))
        object.__setattr__(self, "class_id", ObjectClass.parse(self.class_id))

    @property
    def volume(self) -> float:
        l, w, h = self.dims
        return l * w * h

    def bev(self) -> tuple[float, float, float, float, float]:
        """``(x, y, l, w, yaw)`` footprint parameters."""
        return (self.center[0], self.center[1], self.dims[0], self.dims[1], self.yaw)

    def z_range(self) -> tuple[float, float]:
        half = self.dims[2] / 2.0
        return (self.center[2] - half, self.center[2] + half)


@dataclass
class PointCloud:
    """``(N, 3)`` float64 points with optional ``(N,)`` intensities in [0, 1]."""

    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud contains non-finite coordinates")
        self.points = pts
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise GeometryError("intensity length does not match point count")
            self.intensity = inten

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls) -> PointCloud:
        return cls(np.zeros((0, 3)))


def project_point(p, k: CameraIntrinsics) -> tuple[float, float, float]:
    """Project a camera-frame point to ``(u, v, depth)``. No bounds clipping."""
    x, y, z = (float(c) for c in p)
    if not z > 0:
        raise GeometryError(f"cannot project point with non-positive depth {z}")
    return (k.cx + k.fx * x / z, k.cy + k.fy * y / z, z)


def project_points(pts, k: CameraIntrinsics) -> np.ndarray:
    """Vectorised :func:`project_point`; rows with ``z <= 0`` come back as NaN."""
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    out = np.full((p.shape[0], 3), np.nan)
    ok = p[:, 2] > 0
    z = p[ok, 2]
    out[ok, 0] = k.cx + k.fx * p[ok, 0] / z
    out[ok, 1] = k.cy + k.fy * p[ok, 1] / z
    out[ok, 2] = z
    return out


def backproject_pixel(u: float, v: float, depth: float, k: CameraIntrinsics) -> np.ndarray:
    if not (math.isfinite(depth) and depth > 0):
        raise GeometryError(f"depth must be finite and positive, got {depth}")
    return np.array([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth])


def backproject_pixels(u, v, depth, k: CameraIntrinsics) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(d) & (d > 0)):
        raise GeometryError("all depths must be finite and positive")
    return np.stack([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d], axis=-1)


def transform_points(t: RigidTransform, cloud: PointCloud) -> PointCloud:
    inten = None if cloud.intensity is None else cloud.intensity.copy()
    return PointCloud(t.apply(cloud.points), inten)


def frustum_frame_for(azimuth: float) -> RigidTransform:
    """Rotation about z by ``-azimuth``: the ray at ``azimuth`` lands on +x."""
    return RigidTransform.from_yaw(-azimuth)


def transform_box(t: RigidTransform, box: Box3D) -> Box3D:
    """Apply a rigid motion whose rotation is a pure yaw to a box."""
    r = t.rotation
    if abs(r[2, 2] - 1.0) > 1e-9 or np.max(np.abs(r[:2, 2])) > 1e-9 or np.max(np.abs(r[2, :2])) > 1e-9:
        raise GeometryError("boxes only support transforms that rotate about the up axis")
    dyaw = math.atan2(r[1, 0], r[0, 0])
    return Box3D(tuple(t.apply(box.center)), box.dims, box.yaw + dyaw, box.class_id)


def bev_corners(box: Box3D) -> np.ndarray:
    """Footprint corners ``(4, 2)``, counter-clockwise viewed from +z."""
    x, y, l, w, yaw = box.bev()
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + (x, y)


def corners_of(box: Box3D) -> np.ndarray:
    """Eight corners ``(8, 3)``.

    Order: the bottom face counter-clockwise viewed from +z starting at the
    (+l/2, +w/2) corner, then the top face in the same order.
    """
    foot = bev_corners(box)
    z0, z1 = box.z_range()
    bottom = np.column_stack([foot, np.full(4, z0)])
    top = np.column_stack([foot, np.full(4, z1)])
    return np.vstack([bottom, top])


def points_in_box_mask(box: Box3D, points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = p - np.asarray(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    # inverse yaw into the box frame
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    l, w, h = box.dims
    return (
        (np.abs(lx) <= l / 2 + _INSIDE_EPS)
        & (np.abs(ly) <= w / 2 + _INSIDE_EPS)
        & (np.abs(d[:, 2]) <= h / 2 + _INSIDE_EPS)
    )


def points_in_box(box: Box3D, cloud: PointCloud | np.ndarray) -> int:
    """Count points inside the box; points on the boundary count as inside."""
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    return int(np.count_nonzero(points_in_box_mask(box, pts)))


@dataclass(frozen=True)
class CameraCalibration:
    """Intrinsics plus the transform taking sensor-frame points into the optical camera frame."""

    intrinsics: CameraIntrinsics
    sensor_to_camera: RigidTransform = field(default_factory=lambda: SENSOR_TO_OPTICAL)

    @property
    def camera_to_sensor(self) -> RigidTransform:
        return invert(self.sensor_to_camera)
