"""3D boxes from routed frustums: a geometric baseline head and file adapters for external heads."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mff.evaluation import bev_iou_matrix
from mff.frustum import BevGrid, FrameTag, Frustum, Route, write_bev
from mff.geometry import (
    EVAL_CLASSES,
    Box3D,
    GeometryError,
    ObjectClass,
    RigidTransform,
    frustum_frame_for,
    invert,
)
from mff.openlabel import DatasetManifest, filter_paired, write_point_cloud

SYNTHETIC_SCORE_FACTOR = 0.1

#: placeholder dims (l, w, h) used only for classes absent from training labels
FALLBACK_DIMS = {
    ObjectClass.PERSON: (0.6, 0.6, 1.75),
    ObjectClass.ROAD_VEHICLE: (4.5, 1.8, 1.6),
    ObjectClass.BUFFER_STOP: (2.0, 3.0, 1.5),
    ObjectClass.CATENARY_POLE: (0.5, 0.5, 7.0),
    ObjectClass.SIGNAL_POLE: (0.3, 0.3, 4.0),
}


class HeadError(ValueError):
    pass


class AdapterSchemaError(HeadError):
    def __init__(self, msg: str, line: int, field_name: str | None = None):
        where = f"line {line}" + (f", field {field_name!r}" if field_name else "")
        super().__init__(f"{where}: {msg}")
        self.line = line
        self.field = field_name


@dataclass(frozen=True)
class ClassPrior:
    dims: tuple[float, float, float]
    z_offset: float = 0.0
    fallback: bool = False

    def __post_init__(self):
        if len(self.dims) != 3 or not all(d > 0 for d in self.dims):
            raise HeadError(f"prior dims must be three positive values, got {self.dims}")


@dataclass(frozen=True)
class ClassPriorTable:
    priors: dict = field(default_factory=dict)

    def __post_init__(self):
        table = {ObjectClass.parse(k): v for k, v in self.priors.items()}
        missing = [c.value for c in EVAL_CLASSES if c not in table]
        if missing:
            raise HeadError(f"prior table lacks classes {missing}")
        object.__setattr__(self, "priors", table)

    def __getitem__(self, cls) -> ClassPrior:
        return self.priors[ObjectClass.parse(cls)]

    @classmethod
    def fallback(cls) -> ClassPriorTable:
        return cls({c: ClassPrior(d, d[2] / 2.0, True) for c, d in FALLBACK_DIMS.items()})

    def to_json(self) -> dict:
        return {
            c.value: {"dims": list(p.dims), "z_offset": p.z_offset, "fallback": p.fallback}
            for c, p in sorted(self.priors.items(), key=lambda kv: kv[0].value)
        }

    @classmethod
    def from_json(cls, doc: dict) -> ClassPriorTable:
        return cls(
            {k: ClassPrior(tuple(v["dims"]), float(v.get("z_offset", 0.0)), bool(v.get("fallback", False))) for k, v in doc.items()}
        )


def compute_class_priors(manifest: DatasetManifest, fallback: dict | None = None) -> ClassPriorTable:
    """Mean dims and mean centre height per class over the manifest's paired labels.

    Classes without labels take the fallback dims and are flagged.
    """
    fallback = fallback or FALLBACK_DIMS
    acc: dict[ObjectClass, list] = {c: [] for c in EVAL_CLASSES}
    for f in manifest.frames:
        for lab in filter_paired(f.labels):
            if lab.class_id in acc:
                b = lab.box3d
                acc[lab.class_id].append((*b.dims, b.center[2]))
    priors = {}
    for c in EVAL_CLASSES:
        rows = acc[c]
        if rows:
            m = np.mean(np.asarray(rows), axis=0)
            priors[c] = ClassPrior((float(m[0]), float(m[1]), float(m[2])), float(m[3]))
        else:
            d = tuple(float(x) for x in fallback[ObjectClass.parse(c) if not isinstance(c, ObjectClass) else c])
            priors[c] = ClassPrior(d, d[2] / 2.0, True)
    return ClassPriorTable(priors)


def surface_offsets(priors: ClassPriorTable) -> dict:
    """Half prior length per class: the gap between the visible face and the centre
    for an object whose heading follows the viewing ray."""
    return {c: priors[c].dims[0] / 2.0 for c in EVAL_CLASSES}


@dataclass(frozen=True)
class HeadPrediction:
    box3d: Box3D
    score: float
    route: Route
    frustum_ref: int
    frame_id: str = ""

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise HeadError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "route", Route(self.route))

    @property
    def class_id(self) -> ObjectClass:
        return self.box3d.class_id


def baseline_head(
    f: Frustum,
    priors: ClassPriorTable,
    route: Route = Route.SHORT,
    frustum_ref: int = 0,
) -> HeadPrediction:
    """Deterministic box from a frustum-frame cloud.

    Centre: (fused range, median lateral, median vertical) in the frustum frame,
    rotated back to the sensor frame. Dims: class prior. Yaw: frustum azimuth.
    """
    if f.frame_tag is not FrameTag.FRUSTUM:
        raise HeadError("baseline_head expects a frustum-frame cloud")
    pts = f.points.points
    if pts.shape[0] == 0:
        raise HeadError("baseline_head needs a non-empty frustum")
    local = np.array([f.fused_range, np.median(pts[:, 1]), np.median(pts[:, 2])])
    if pts.shape[0] == 1:
        local[1:] = pts[0, 1:]
        if not f.synthetic:
            local[0] = pts[0, 0]
    center = invert(frustum_frame_for(f.azimuth)).apply(local)
    prior = priors[f.class_id] if f.class_id in EVAL_CLASSES else ClassPrior(FALLBACK_DIMS[ObjectClass.PERSON], 0.0, True)
    score = f.detection.confidence * (SYNTHETIC_SCORE_FACTOR if f.synthetic else 1.0)
    box = Box3D(tuple(center), prior.dims, f.azimuth, f.class_id)
    return HeadPrediction(box, score, route, frustum_ref, f.detection.frame_id)


# ---------------------------------------------------------------- NMS


def merge_and_nms(short_preds, long_preds, iou_threshold: float = 0.25) -> list[HeadPrediction]:
    """Concatenate both routes and greedily suppress BEV overlaps above the threshold.

    Suppression runs per frame and per class. Candidates are visited by
    (score desc, frame_id, frustum_ref asc), which makes the result
    independent of input order.
    """
    if not (0.0 <= iou_threshold <= 1.0):
        raise HeadError("iou_threshold must lie in [0, 1]")
    preds = sorted(
        list(short_preds) + list(long_preds), key=lambda p: (-p.score, p.frame_id, p.frustum_ref, p.route.value)
    )
    groups: dict[tuple, list[HeadPrediction]] = {}
    for p in preds:
        groups.setdefault((p.frame_id, p.class_id), []).append(p)
    keep_ids = set()
    for group in groups.values():
        if len(group) == 1:
            keep_ids.add(id(group[0]))
            continue
        iou = bev_iou_matrix([p.box3d for p in group], [p.box3d for p in group])
        suppressed = np.zeros(len(group), dtype=bool)
        for i in range(len(group)):
            if suppressed[i]:
                continue
            keep_ids.add(id(group[i]))
            suppressed[i + 1 :] |= iou[i, i + 1 :] > iou_threshold
    return [p for p in preds if id(p) in keep_ids]


# ---------------------------------------------------------------- adapter files


_PRED_FIELDS = ("frame_id", "class", "score", "cx", "cy", "cz", "l", "w", "h", "yaw", "frame", "route", "frustum_ref")


def prediction_to_json(p: HeadPrediction) -> dict:
    b = p.box3d
    return {
        "frame_id": p.frame_id,
        "class": b.class_id.value,
        "score": p.score,
        "cx": b.center[0],
        "cy": b.center[1],
        "cz": b.center[2],
        "l": b.dims[0],
        "w": b.dims[1],
        "h": b.dims[2],
        "yaw": b.yaw,
        "frame": "sensor",
        "route": p.route.value,
        "frustum_ref": p.frustum_ref,
    }


def write_predictions(path, preds) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps(prediction_to_json(p), sort_keys=True) + "\n")


def read_adapter_predictions(path, bundle_index=None) -> list[HeadPrediction]:
    """Read head predictions from JSON Lines, validating each record.

    Records with ``"frame": "frustum"`` are rotated back to the sensor frame
    using the azimuth of the referenced frustum in ``bundle_index`` (a mapping
    ``(frame_id, frustum_ref) -> azimuth`` or a bundle directory).
    """
    if bundle_index is not None and not isinstance(bundle_index, dict):
        bundle_index = {(e["frame_id"], e["frustum_ref"]): e["azimuth"] for e in read_bundle_index(bundle_index)}
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AdapterSchemaError(exc.msg, lineno) from None
            if not isinstance(rec, dict):
                raise AdapterSchemaError("record is not an object", lineno)
            out.append(_prediction_from_record(rec, lineno, bundle_index))
    return out


def _number(rec, name, lineno):
    try:
        v = float(rec[name])
    except KeyError:
        raise AdapterSchemaError("missing field", lineno, name) from None
    except (TypeError, ValueError):
        raise AdapterSchemaError("not a number", lineno, name) from None
    if not math.isfinite(v):
        raise AdapterSchemaError("not finite", lineno, name)
    return v


def _prediction_from_record(rec, lineno, bundle_index) -> HeadPrediction:
    for name in _PRED_FIELDS:
        if name not in rec:
            raise AdapterSchemaError("missing field", lineno, name)
    vals = {n: _number(rec, n, lineno) for n in ("score", "cx", "cy", "cz", "l", "w", "h", "yaw")}
    for n in ("l", "w", "h"):
        if vals[n] <= 0:
            raise AdapterSchemaError(f"box dimension must be positive, got {vals[n]}", lineno, n)
    if not (0.0 <= vals["score"] <= 1.0):
        raise AdapterSchemaError("score outside [0, 1]", lineno, "score")
    try:
        cls = ObjectClass.parse(rec["class"])
    except (GeometryError, AttributeError):
        raise AdapterSchemaError(f"unknown class {rec['class']!r}", lineno, "class") from None
    if rec["route"] not in ("short", "long"):
        raise AdapterSchemaError(f"route must be 'short' or 'long', got {rec['route']!r}", lineno, "route")
    ref = rec["frustum_ref"]
    if not isinstance(ref, int) or isinstance(ref, bool) or ref < 0:
        raise AdapterSchemaError("frustum_ref must be a non-negative integer", lineno, "frustum_ref")
    box = Box3D((vals["cx"], vals["cy"], vals["cz"]), (vals["l"], vals["w"], vals["h"]), vals["yaw"], cls)
    frame = rec["frame"]
    if frame == "frustum":
        key = (str(rec["frame_id"]), ref)
        if bundle_index is None or key not in bundle_index:
            raise AdapterSchemaError(f"no bundled azimuth for frustum {key}", lineno, "frame")
        az = bundle_index[key]
        box = Box3D(tuple(RigidTransform.from_yaw(az).apply(box.center)), box.dims, box.yaw + az, cls)
    elif frame != "sensor":
        raise AdapterSchemaError(f"frame must be 'sensor' or 'frustum', got {frame!r}", lineno, "frame")
    return HeadPrediction(box, vals["score"], Route(rec["route"]), ref, str(rec["frame_id"]))


# ---------------------------------------------------------------- frustum bundles


def _safe_name(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", s)


def write_frustum_bundle(entries, path) -> Path:
    """Write ``(frame_id, frustum_ref, frustum, route[, bev])`` entries to a bundle directory.

    Each frustum's points go to a PCLB file; ``index.jsonl`` carries the
    metadata external heads need. BEV grids, when given, are written next to it.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for entry in entries:
        frame_id, ref, f, rte = entry[:4]
        bev: BevGrid | None = entry[4] if len(entry) > 4 else None
        stem = f"{_safe_name(frame_id)}__{ref:04d}"
        write_point_cloud(root / f"{stem}.pclb", f.points)
        det = f.detection
        rec = {
            "frame_id": frame_id,
            "frustum_ref": ref,
            "file": f"{stem}.pclb",
            "frame": f.frame_tag.value,
            "azimuth": f.azimuth,
            "fused_distance": f.fused_distance,
            "centroid_distance": f.centroid_distance,
            "centroid_lateral": f.centroid_lateral,
            "class": f.class_id.value,
            "route": Route(rte).value,
            "confidence": det.confidence,
            "distance_m": det.distance_m,
            "box2d": list(det.box2d.as_tuple()),
            "synthetic": f.synthetic,
            "points": len(f.points),
        }
        if bev is not None:
            write_bev(root / f"{stem}.bev", bev)
            rec["bev"] = f"{stem}.bev"
        lines.append(json.dumps(rec, sort_keys=True))
    (root / "index.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return root


def read_bundle_index(path) -> list[dict]:
    p = Path(path)
    if p.is_dir():
        p = p / "index.jsonl"
    return [json.loads(line) for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]
