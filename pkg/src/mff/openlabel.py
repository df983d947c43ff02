"""OpenLABEL subset parsing, PCLB point clouds and split manifests.

Only the parts of an OpenLABEL document this toolkit needs are read:
``streams`` (camera intrinsics, frame URIs), ``coordinate_systems`` (poses),
``objects`` (class names) and per-frame ``object_data`` holding ``bbox`` and
``cuboid`` entries. Everything else is ignored.

Camera coordinate systems are assumed to use the sensor axis convention
(x forward, y left, z up); they are converted to the optical convention on
ingest.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import warnings
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from mff.geometry import (
    SENSOR_TO_OPTICAL,
    Box2D,
    Box3D,
    CameraCalibration,
    CameraIntrinsics,
    ObjectClass,
    PointCloud,
    RigidTransform,
    compose,
    invert,
)

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
PCLB_MAGIC = b"PCLB"
_PCLB_HEADER = struct.Struct("<4sIB")
_TILT_TOL = 1e-9


class OpenLabelError(ValueError):
    pass


class OpenLabelParseError(OpenLabelError):
    def __init__(self, msg: str, line: int, column: int):
        super().__init__(f"{msg} (line {line}, column {column})")
        self.line = line
        self.column = column


class OpenLabelSchemaError(OpenLabelError):
    def __init__(self, msg: str, object_id: str | None = None):
        super().__init__(msg if object_id is None else f"object {object_id}: {msg}")
        self.object_id = object_id


class CalibrationError(OpenLabelError):
    pass


class ManifestError(ValueError):
    pass


class PointCloudFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} at byte offset {offset}")
        self.offset = offset


class MissingCalibrationWarning(UserWarning):
    pass


class NonFinitePointsWarning(UserWarning):
    def __init__(self, count: int, path: str = ""):
        super().__init__(f"dropped {count} non-finite point(s) from {path or 'cloud'}")
        self.count = count


def load_class_map(path: str | Path | None = None) -> dict[str, ObjectClass]:
    """Source class name -> :class:`ObjectClass`. Defaults to the shipped table."""
    if path is None:
        text = resources.files("mff").joinpath("data/class_map.json").read_text()
    else:
        text = Path(path).read_text()
    return {k.lower(): ObjectClass.parse(v) for k, v in json.loads(text).items()}


@dataclass(frozen=True)
class ObjectLabel:
    object_id: str
    class_id: ObjectClass
    box2d: Box2D | None = None
    box3d: Box3D | None = None
    source_sensor: str = ""
    source_class: str = ""

    def __post_init__(self):
        if self.box2d is None and self.box3d is None:
            raise OpenLabelSchemaError("label carries neither a 2D box nor a cuboid", self.object_id)

    @property
    def paired(self) -> bool:
        return self.box2d is not None and self.box3d is not None


@dataclass(frozen=True)
class FrameAnnotation:
    frame_id: str
    labels: tuple[ObjectLabel, ...] = ()
    calibration: dict[str, CameraCalibration] = field(default_factory=dict)
    cloud_path: str | None = None
    image_path: str | None = None
    camera: str | None = None
    lidar: str | None = None
    tilt_warnings: int = 0

    def __hash__(self):
        return hash(self.frame_id)

    def camera_calibration(self, camera: str | None = None) -> CameraCalibration | None:
        name = camera or self.camera
        if name is None:
            return next(iter(self.calibration.values()), None)
        return self.calibration.get(name)


@dataclass(frozen=True)
class DatasetManifest:
    frames: tuple[FrameAnnotation, ...]
    split: str
    root: str = ""

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        ids = [f.frame_id for f in self.frames]
        dup = sorted(k for k, n in Counter(ids).items() if n > 1)
        if dup:
            raise ManifestError(f"duplicate frame ids in manifest: {dup}")

    @property
    def class_histogram(self) -> dict[str, int]:
        counts = Counter(lab.class_id.value for f in self.frames for lab in f.labels)
        return {k: counts[k] for k in sorted(counts)}

    def frame(self, frame_id: str) -> FrameAnnotation:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(frame_id)

    @property
    def frame_ids(self) -> list[str]:
        return [f.frame_id for f in self.frames]


def filter_paired(labels) -> list[ObjectLabel]:
    """Keep only labels that carry both a 2D box and a cuboid, in order."""
    return [lab for lab in labels if lab.paired]


# ---------------------------------------------------------------- cuboids


def _quat_to_matrix(qx, qy, qz, qw) -> np.ndarray:
    n = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
    if n == 0:
        raise ValueError("zero quaternion")
    qx, qy, qz, qw = qx / n, qy / n, qz / n, qw / n
    return np.array(
        [
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
            [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
            [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
        ]
    )


def _euler_to_matrix(rx, ry, rz) -> np.ndarray:
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    rot_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rot_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rot_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rot_z @ rot_y @ rot_x


def cuboid_to_box(val, class_id: ObjectClass, object_id: str = "") -> tuple[Box3D, bool]:
    """Convert a 9- or 10-value cuboid to a yaw-only box.

    Returns the box and whether a non-yaw rotation component was discarded.
    """
    vals = [float(v) for v in val]
    if len(vals) == 10:
        x, y, z, qx, qy, qz, qw, sx, sy, sz = vals
        try:
            rot = _quat_to_matrix(qx, qy, qz, qw)
        except ValueError:
            raise OpenLabelSchemaError("cuboid quaternion has zero norm", object_id) from None
    elif len(vals) == 9:
        x, y, z, rx, ry, rz, sx, sy, sz = vals
        rot = _euler_to_matrix(rx, ry, rz)
    else:
        raise OpenLabelSchemaError(f"cuboid must have 9 or 10 values, got {len(vals)}", object_id)
    yaw = math.atan2(rot[1, 0], rot[0, 0])
    tilted = abs(rot[2, 2] - 1.0) > _TILT_TOL
    try:
        box = Box3D((x, y, z), (sx, sy, sz), yaw, class_id)
    except ValueError as exc:
        raise OpenLabelSchemaError(str(exc), object_id) from None
    return box, tilted


def box_to_cuboid(box: Box3D) -> list[float]:
    """10-value quaternion encoding of a yaw-only box."""
    half = box.yaw / 2.0
    return [*box.center, 0.0, 0.0, math.sin(half), math.cos(half), *box.dims]


# ---------------------------------------------------------------- calibration


def _root_poses(coordinate_systems: dict) -> dict[str, RigidTransform]:
    """Pose of every coordinate system relative to the root of its parent chain."""
    poses: dict[str, RigidTransform] = {}

    def resolve(name: str, depth: int = 0) -> RigidTransform:
        if name in poses:
            return poses[name]
        if depth > 64:
            raise CalibrationError(f"coordinate system chain through {name!r} is cyclic")
        cs = coordinate_systems.get(name) or {}
        parent = cs.get("parent") or ""
        pose = cs.get("pose_wrt_parent") or {}
        mat = pose.get("matrix4x4")
        local = RigidTransform.identity() if mat is None else _rigid_from_list(mat, name)
        if parent and parent in coordinate_systems:
            result = compose(resolve(parent, depth + 1), local)
        else:
            result = local
        poses[name] = result
        return result

    for name in coordinate_systems:
        resolve(name)
    return poses


def _rigid_from_list(mat, name: str) -> RigidTransform:
    try:
        return RigidTransform.from_matrix(np.asarray(mat, dtype=np.float64).reshape(4, 4))
    except ValueError as exc:
        raise CalibrationError(f"invalid pose for {name!r}: {exc}") from None


def _parse_intrinsics(name: str, stream: dict, ignore_distortion: bool) -> CameraIntrinsics | None:
    props = (stream.get("stream_properties") or {}).get("intrinsics_pinhole")
    if not props:
        return None
    m = props.get("camera_matrix_3x4") or props.get("camera_matrix")
    if m is None:
        return None
    m = np.asarray(m, dtype=np.float64).reshape(-1)
    if m.size not in (9, 12):
        raise CalibrationError(f"camera {name!r}: camera matrix must have 9 or 12 values")
    m = m.reshape(3, -1)
    dist = props.get("distortion_coeffs_1xN") or []
    if any(float(d) != 0.0 for d in dist) and not ignore_distortion:
        raise CalibrationError(
            f"camera {name!r} has non-zero distortion coefficients; "
            "pass ignore_distortion (--ignore-distortion) to use it as a pinhole"
        )
    try:
        return CameraIntrinsics(
            fx=float(m[0, 0]),
            fy=float(m[1, 1]),
            cx=float(m[0, 2]),
            cy=float(m[1, 2]),
            width=int(props["width_px"]),
            height=int(props["height_px"]),
        )
    except (KeyError, ValueError) as exc:
        raise CalibrationError(f"camera {name!r}: {exc}") from None


# ---------------------------------------------------------------- parsing


def _pick(entries, stream: str | None):
    if not entries:
        return None
    if stream is not None:
        for e in entries:
            if e.get("coordinate_system") == stream or e.get("stream") == stream:
                return e
        # entries that name no stream belong to the selected one
        return next((e for e in entries if not (e.get("coordinate_system") or e.get("stream"))), None)
    return entries[0]


def parse_openlabel(
    document: str | bytes | dict,
    *,
    camera: str | None = None,
    lidar: str | None = None,
    sequence: str | None = None,
    class_map: dict[str, ObjectClass] | None = None,
    ignore_distortion: bool = False,
) -> list[FrameAnnotation]:
    """Parse an OpenLABEL document into frame annotations sorted by frame key.

    ``camera`` / ``lidar`` select which bbox and cuboid streams are read. They
    may be omitted only when the document has at most one stream of that kind. Frame ids are the frame keys,
    prefixed with ``"<sequence>_"`` when a sequence name is given.
    """
    if isinstance(document, dict):
        doc = document
    else:
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise OpenLabelParseError(exc.msg, exc.lineno, exc.colno) from None
    if not isinstance(doc, dict) or not isinstance(doc.get("openlabel"), dict):
        raise OpenLabelSchemaError("document has no top-level 'openlabel' object")
    ol = doc["openlabel"]
    class_map = class_map if class_map is not None else load_class_map()

    streams = ol.get("streams") or {}
    coordinate_systems = ol.get("coordinate_systems") or {}
    objects = ol.get("objects") or {}
    frames = ol.get("frames") or {}
    for section, value in (("streams", streams), ("objects", objects), ("frames", frames)):
        if not isinstance(value, dict):
            raise OpenLabelSchemaError(f"'{section}' must be a JSON object")

    for kind, chosen in (("camera", camera), ("lidar", lidar)):
        names = sorted(n for n, s in streams.items() if (s or {}).get("type") == kind)
        if chosen is None and len(names) > 1:
            raise OpenLabelSchemaError(f"document has several {kind} streams {names}; select one explicitly")
    if lidar is None:
        lidar = next((n for n, s in streams.items() if (s or {}).get("type") == "lidar"), None)
    calibration = _calibrations(streams, coordinate_systems, lidar, ignore_distortion)
    if camera is not None and camera not in calibration:
        warnings.warn(
            MissingCalibrationWarning(f"no calibration for camera {camera!r}; geometry ops unavailable"),
            stacklevel=2,
        )
    elif not calibration:
        warnings.warn(MissingCalibrationWarning("document carries no camera calibration"), stacklevel=2)

    result = []
    for key in sorted(frames, key=_frame_sort_key):
        frame = frames[key] or {}
        frame_id = f"{sequence}_{key}" if sequence else str(key)
        labels, tilted = _parse_frame_objects(
            frame.get("objects") or {}, objects, class_map, camera, lidar, calibration
        )
        fstreams = (frame.get("frame_properties") or {}).get("streams") or {}
        image_path = cloud_path = None
        cam_name = camera or next(iter(calibration), None)
        if cam_name and cam_name in fstreams:
            image_path = fstreams[cam_name].get("uri")
        if lidar and lidar in fstreams:
            cloud_path = fstreams[lidar].get("uri")
        result.append(
            FrameAnnotation(
                frame_id=frame_id,
                labels=tuple(labels),
                calibration=dict(calibration),
                cloud_path=cloud_path,
                image_path=image_path,
                camera=camera,
                lidar=lidar,
                tilt_warnings=tilted,
            )
        )
    return result


def _frame_sort_key(key: str):
    return (0, int(key), key) if str(key).lstrip("-").isdigit() else (1, 0, str(key))


def _calibrations(streams, coordinate_systems, lidar, ignore_distortion) -> dict[str, CameraCalibration]:
    poses = _root_poses(coordinate_systems) if coordinate_systems else {}
    sensor_pose = poses.get(lidar, RigidTransform.identity()) if lidar else RigidTransform.identity()
    out = {}
    for name, stream in streams.items():
        if (stream or {}).get("type") != "camera":
            continue
        k = _parse_intrinsics(name, stream, ignore_distortion)
        if k is None:
            continue
        cam_pose = poses.get(name, RigidTransform.identity())
        # sensor -> root -> camera (sensor axes) -> optical
        s2c = compose(SENSOR_TO_OPTICAL, compose(invert(cam_pose), sensor_pose))
        out[name] = CameraCalibration(k, s2c)
    return out


def _parse_frame_objects(frame_objects, objects, class_map, camera, lidar, calibration):
    labels = []
    tilted = 0
    for oid in sorted(frame_objects):
        entry = frame_objects[oid] or {}
        meta = objects.get(oid) or {}
        source_class = str(meta.get("type", ""))
        class_id = class_map.get(source_class.lower(), ObjectClass.OTHER)
        data = entry.get("object_data") or {}
        box2d = box3d = None
        sensor = ""

        bbox = _pick(data.get("bbox") or [], camera)
        if bbox is not None:
            val = bbox.get("val") or []
            if len(val) != 4:
                raise OpenLabelSchemaError(f"bbox must have 4 values, got {len(val)}", oid)
            cx, cy, w, h = (float(v) for v in val)
            sensor = bbox.get("coordinate_system") or camera or ""
            calib = calibration.get(sensor)
            try:
                if calib is not None:
                    k = calib.intrinsics
                    box2d = Box2D.clipped(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, k.width, k.height)
                else:
                    box2d = Box2D.from_center(cx, cy, w, h)
            except ValueError as exc:
                raise OpenLabelSchemaError(f"invalid bbox: {exc}", oid) from None

        cub = _pick(data.get("cuboid") or [], lidar)
        if cub is not None:
            box3d, was_tilted = cuboid_to_box(cub.get("val") or [], class_id, oid)
            tilted += int(was_tilted)
            sensor = sensor or cub.get("coordinate_system") or lidar or ""

        if box2d is None and box3d is None:
            continue
        labels.append(ObjectLabel(oid, class_id, box2d, box3d, sensor, source_class))
    return labels, tilted


# ---------------------------------------------------------------- writing


def to_openlabel(frames, *, sequence: str | None = None) -> dict:
    """Write frames back to the OpenLABEL subset understood by :func:`parse_openlabel`.

    All frames must share one calibration. Frame ids must be integer keys, or
    ``"<sequence>_<int>"`` when ``sequence`` is given.
    """
    frames = list(frames)
    streams: dict = {}
    coordinate_systems: dict = {}
    objects: dict = {}
    out_frames: dict = {}
    calib = frames[0].calibration if frames else {}
    lidar = next((f.lidar for f in frames if f.lidar), None)
    # a lidar stream is only invented when something hangs off it
    if lidar is None and (
        calib or any(f.cloud_path is not None or any(lab.box3d is not None for lab in f.labels) for f in frames)
    ):
        lidar = "lidar"
    if lidar is not None:
        coordinate_systems[lidar] = {"type": "sensor_cs", "parent": "", "pose_wrt_parent": {"matrix4x4": np.eye(4).reshape(-1).tolist()}}
        streams[lidar] = {"type": "lidar"}
    for f in frames:
        if f.calibration.keys() != calib.keys() or any(
            not f.calibration[n].sensor_to_camera.allclose(calib[n].sensor_to_camera, 0.0)
            or f.calibration[n].intrinsics != calib[n].intrinsics
            for n in calib
        ):
            raise OpenLabelError("frames written to one document must share calibration")
    for name, cc in calib.items():
        k = cc.intrinsics
        streams[name] = {
            "type": "camera",
            "stream_properties": {
                "intrinsics_pinhole": {
                    "width_px": k.width,
                    "height_px": k.height,
                    "camera_matrix_3x4": [k.fx, 0.0, k.cx, 0.0, 0.0, k.fy, k.cy, 0.0, 0.0, 0.0, 1.0, 0.0],
                    "distortion_coeffs_1xN": [0.0, 0.0, 0.0, 0.0, 0.0],
                }
            },
        }
        # camera pose in the lidar frame, expressed with sensor axes
        pose = invert(compose(invert(SENSOR_TO_OPTICAL), cc.sensor_to_camera))
        coordinate_systems[name] = {
            "type": "sensor_cs",
            "parent": lidar,
            "pose_wrt_parent": {"matrix4x4": pose.matrix().reshape(-1).tolist()},
        }

    for f in frames:
        key = f.frame_id
        if sequence:
            prefix = f"{sequence}_"
            if not key.startswith(prefix):
                raise OpenLabelError(f"frame id {key!r} does not belong to sequence {sequence!r}")
            key = key[len(prefix):]
        if not key.lstrip("-").isdigit():
            raise OpenLabelError(f"frame id {f.frame_id!r} has no integer frame key")
        fobjs = {}
        for lab in f.labels:
            otype = lab.source_class or lab.class_id.value
            prev = objects.setdefault(lab.object_id, {"name": lab.object_id, "type": otype})
            if prev["type"] != otype:
                raise OpenLabelError(f"object {lab.object_id!r} has conflicting types {prev['type']!r} and {otype!r}")
            data: dict = {}
            if lab.box2d is not None:
                b = lab.box2d
                cam = lab.source_sensor if lab.source_sensor in calib else (f.camera or next(iter(calib), None))
                cam = cam or lab.source_sensor
                entry = {"name": f"bbox-{cam or 'image'}", "val": [(b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2, b.x2 - b.x1, b.y2 - b.y1]}
                if cam:
                    entry["coordinate_system"] = cam
                data["bbox"] = [entry]
            if lab.box3d is not None:
                data["cuboid"] = [
                    {"name": f"cuboid-{lidar}", "val": box_to_cuboid(lab.box3d), "coordinate_system": lidar}
                ]
            fobjs[lab.object_id] = {"object_data": data}
        fstreams = {}
        if f.image_path is not None:
            cam = f.camera or next(iter(calib), "camera")
            fstreams[cam] = {"uri": f.image_path}
        if f.cloud_path is not None:
            fstreams[lidar] = {"uri": f.cloud_path}
        out_frames[key] = {"objects": fobjs, "frame_properties": {"streams": fstreams}}

    return {
        "openlabel": {
            "metadata": {"schema_version": "1.0.0"},
            "streams": streams,
            "coordinate_systems": coordinate_systems,
            "objects": objects,
            "frames": out_frames,
        }
    }


# ---------------------------------------------------------------- point clouds


def write_point_cloud(path, cloud: PointCloud) -> None:
    fields = 3 if cloud.intensity is None else 4
    data = cloud.points if fields == 3 else np.column_stack([cloud.points, cloud.intensity])
    with open(path, "wb") as fh:
        fh.write(_PCLB_HEADER.pack(PCLB_MAGIC, len(cloud), fields))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_point_cloud(path) -> PointCloud:
    """Read a PCLB file, or whitespace-separated ``x y z [intensity]`` text.

    Points with any non-finite field are dropped and reported through a
    :class:`NonFinitePointsWarning` carrying the drop count.
    """
    raw = Path(path).read_bytes()
    if raw.startswith(PCLB_MAGIC):
        data = _decode_pclb(raw)
    else:
        data = _decode_ascii(raw, path)
    if data.shape[0] == 0:
        return PointCloud.empty()
    ok = np.all(np.isfinite(data), axis=1)
    dropped = int(data.shape[0] - np.count_nonzero(ok))
    if dropped:
        warnings.warn(NonFinitePointsWarning(dropped, str(path)), stacklevel=2)
        data = data[ok]
    pts = data[:, :3].astype(np.float64)
    inten = data[:, 3].astype(np.float64) if data.shape[1] == 4 else None
    return PointCloud(pts, inten)


def _decode_pclb(raw: bytes) -> np.ndarray:
    if len(raw) < _PCLB_HEADER.size:
        raise PointCloudFormatError("truncated PCLB header", len(raw))
    _, count, fields = _PCLB_HEADER.unpack_from(raw, 0)
    if fields not in (3, 4):
        raise PointCloudFormatError(f"fields-per-point must be 3 or 4, got {fields}", 8)
    rec = 4 * fields
    body = len(raw) - _PCLB_HEADER.size
    if body < count * rec:
        complete = body // rec
        raise PointCloudFormatError(
            f"truncated record {complete} of {count}", _PCLB_HEADER.size + complete * rec
        )
    if body > count * rec:
        raise PointCloudFormatError("trailing bytes after last record", _PCLB_HEADER.size + count * rec)
    arr = np.frombuffer(raw, dtype="<f4", count=count * fields, offset=_PCLB_HEADER.size)
    return arr.reshape(count, fields)


def _decode_ascii(raw: bytes, path) -> np.ndarray:
    rows = []
    width = None
    offset = 0
    for line in raw.decode("utf-8").splitlines(keepends=True):
        text = line.split("#", 1)[0].strip()
        if text:
            parts = text.replace(",", " ").split()
            if len(parts) not in (3, 4) or (width is not None and len(parts) != width):
                raise PointCloudFormatError(f"{path}: expected 3 or 4 columns, got {len(parts)}", offset)
            width = len(parts)
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise PointCloudFormatError(f"{path}: non-numeric value", offset) from None
        offset += len(line.encode("utf-8"))
    if not rows:
        return np.zeros((0, 3), dtype=np.float32)
    return np.asarray(rows, dtype=np.float32)


# ---------------------------------------------------------------- manifests


def _load_splits(root: Path, split_spec) -> dict[str, list[str]]:
    if split_spec is None:
        split_spec = root / "splits.json"
    if isinstance(split_spec, (str, Path)):
        try:
            split_spec = json.loads(Path(split_spec).read_text())
        except FileNotFoundError:
            raise ManifestError(f"split file not found: {split_spec}") from None
    unknown = set(split_spec) - set(SPLITS)
    if unknown:
        raise ManifestError(f"unknown split names {sorted(unknown)}")
    return {s: [str(x) for x in split_spec.get(s, [])] for s in SPLITS}


def build_manifest(
    root_dir,
    split_spec=None,
    *,
    camera: str | None = None,
    lidar: str | None = None,
    ignore_distortion: bool = False,
    class_map: dict[str, ObjectClass] | None = None,
    jobs: int = 1,
) -> dict[str, DatasetManifest]:
    """Build one manifest per split from ``root_dir/labels/*.json``.

    Each label file is one sequence; frame ids are ``"<file stem>_<frame key>"``.
    Frame URIs are resolved relative to ``root_dir`` and must exist.
    """
    root = Path(root_dir).resolve()
    splits = _load_splits(root, split_spec)

    owner: dict[str, str] = {}
    overlap = []
    for s in SPLITS:
        for fid in splits[s]:
            if fid in owner and owner[fid] != s:
                overlap.append(f"{fid} ({owner[fid]}, {s})")
            owner[fid] = s
    if overlap:
        raise ManifestError("frames assigned to more than one split: " + ", ".join(sorted(overlap)))

    label_files = sorted((root / "labels").glob("*.json"))
    if not label_files:
        raise ManifestError(f"no label files under {root / 'labels'}")

    def parse_file(p: Path):
        try:
            return parse_openlabel(
                p.read_text(encoding="utf-8"),
                camera=camera,
                lidar=lidar,
                sequence=p.stem,
                class_map=class_map,
                ignore_distortion=ignore_distortion,
            )
        except OpenLabelError as exc:
            raise ManifestError(f"{p}: {exc}") from exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parsed = list(pool.map(parse_file, label_files))
    else:
        parsed = [parse_file(p) for p in label_files]

    by_id: dict[str, FrameAnnotation] = {}
    for frames in parsed:
        for f in frames:
            if f.frame_id in by_id:
                raise ManifestError(f"frame id {f.frame_id} defined twice")
            by_id[f.frame_id] = _resolve_paths(f, root)

    missing = sorted(set(owner) - set(by_id))
    if missing:
        raise ManifestError(f"split file references unknown frames: {missing}")
    unassigned = len(by_id) - len(owner)
    if unassigned:
        logger.info("%d frame(s) not assigned to any split", unassigned)

    return {
        s: DatasetManifest(tuple(by_id[fid] for fid in sorted(splits[s])), s, str(root)) for s in SPLITS
    }


def _resolve_paths(f: FrameAnnotation, root: Path) -> FrameAnnotation:
    paths = {}
    for attr in ("cloud_path", "image_path"):
        rel = getattr(f, attr)
        if rel is None:
            paths[attr] = None
            continue
        p = Path(rel)
        p = p if p.is_absolute() else root / p
        if not p.exists():
            raise ManifestError(f"frame {f.frame_id}: {attr.replace('_', ' ')} does not exist: {p}")
        paths[attr] = str(p)
    return FrameAnnotation(
        f.frame_id, f.labels, f.calibration, paths["cloud_path"], paths["image_path"], f.camera, f.lidar, f.tilt_warnings
    )


def _label_to_json(lab: ObjectLabel) -> dict:
    d: dict = {"object_id": lab.object_id, "class": lab.class_id.value, "source_sensor": lab.source_sensor}
    if lab.source_class:
        d["source_class"] = lab.source_class
    if lab.box2d is not None:
        d["box2d"] = list(lab.box2d.as_tuple())
    if lab.box3d is not None:
        b = lab.box3d
        d["box3d"] = {"center": list(b.center), "dims": list(b.dims), "yaw": b.yaw}
    return d


def _label_from_json(d: dict) -> ObjectLabel:
    cls = ObjectClass.parse(d["class"])
    b2 = Box2D(*d["box2d"]) if d.get("box2d") is not None else None
    b3 = None
    if d.get("box3d") is not None:
        b3 = Box3D(tuple(d["box3d"]["center"]), tuple(d["box3d"]["dims"]), d["box3d"]["yaw"], cls)
    return ObjectLabel(d["object_id"], cls, b2, b3, d.get("source_sensor", ""), d.get("source_class", ""))


def frame_to_json(f: FrameAnnotation) -> dict:
    calib = {}
    for name in sorted(f.calibration):
        cc = f.calibration[name]
        k = cc.intrinsics
        calib[name] = {
            "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height},
            "sensor_to_camera": cc.sensor_to_camera.matrix().tolist(),
        }
    return {
        "frame_id": f.frame_id,
        "camera": f.camera,
        "lidar": f.lidar,
        "cloud_path": f.cloud_path,
        "image_path": f.image_path,
        "tilt_warnings": f.tilt_warnings,
        "calibration": calib,
        "labels": [_label_to_json(lab) for lab in f.labels],
    }


def frame_from_json(d: dict) -> FrameAnnotation:
    calib = {
        name: CameraCalibration(CameraIntrinsics(**c["intrinsics"]), RigidTransform.from_matrix(c["sensor_to_camera"]))
        for name, c in d.get("calibration", {}).items()
    }
    return FrameAnnotation(
        frame_id=d["frame_id"],
        labels=tuple(_label_from_json(x) for x in d.get("labels", [])),
        calibration=calib,
        cloud_path=d.get("cloud_path"),
        image_path=d.get("image_path"),
        camera=d.get("camera"),
        lidar=d.get("lidar"),
        tilt_warnings=d.get("tilt_warnings", 0),
    )


def manifest_to_json(m: DatasetManifest) -> str:
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "split": m.split,
        "root": m.root,
        "class_histogram": m.class_histogram,
        "frames": [frame_to_json(f) for f in m.frames],
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def manifest_from_json(text: str) -> DatasetManifest:
    doc = json.loads(text)
    if doc.get("manifest_version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest_version {doc.get('manifest_version')!r}")
    return DatasetManifest(tuple(frame_from_json(f) for f in doc["frames"]), doc["split"], doc.get("root", ""))


def save_manifest(m: DatasetManifest, path) -> None:
    Path(path).write_text(manifest_to_json(m), encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    try:
        return manifest_from_json(Path(path).read_text(encoding="utf-8"))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: malformed manifest ({exc})") from None
