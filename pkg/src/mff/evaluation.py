"""Measurement protocol: rotated IoU, greedy matching, all-point AP, range-binned MAE and dataset statistics.

AP uses all-point interpolation (area under the monotone precision envelope),
not the 11- or 40-point sampled variants, so absolute values are not directly
comparable with KITTI-style numbers.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from mff import kernels
from mff.geometry import EVAL_CLASSES, Box2D, Box3D, ObjectClass, points_in_box
from mff.openlabel import DatasetManifest, filter_paired, read_point_cloud

NA = "N/A"  # no ground truth in scope
ND = "N/D"  # ground truth present, nothing matched

REPORT_VERSION = 1
DEFAULT_RANGE_EDGES = (0.0, 50.0, 100.0, 150.0, 200.0, 250.0)
SHORT_RANGE_IOU = 0.5
LONG_RANGE_IOU = 0.1


class EvalError(ValueError):
    pass


class MissingCloudWarning(UserWarning):
    pass


# ---------------------------------------------------------------- IoU


def iou_2d(a: Box2D, b: Box2D) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _bev_rows(boxes: Sequence[Box3D]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 5))
    return np.array([[b.center[0], b.center[1], b.dims[0], b.dims[1], b.yaw] for b in boxes], dtype=np.float64)


def bev_intersection_matrix(a: Sequence[Box3D], b: Sequence[Box3D]) -> np.ndarray:
    return kernels.bev_overlap_matrix(_bev_rows(a), _bev_rows(b))


def bev_iou_matrix(a: Sequence[Box3D], b: Sequence[Box3D]) -> np.ndarray:
    inter = bev_intersection_matrix(a, b)
    area_a = np.array([x.dims[0] * x.dims[1] for x in a]).reshape(-1, 1)
    area_b = np.array([x.dims[0] * x.dims[1] for x in b]).reshape(1, -1)
    union = area_a + area_b - inter
    return np.clip(np.divide(inter, union, out=np.zeros_like(inter), where=union > 0), 0.0, 1.0)


def iou3d_matrix(a: Sequence[Box3D], b: Sequence[Box3D]) -> np.ndarray:
    inter_bev = bev_intersection_matrix(a, b)
    za = np.array([x.z_range() for x in a]).reshape(-1, 2)
    zb = np.array([x.z_range() for x in b]).reshape(-1, 2)
    dz = np.minimum(za[:, 1:2], zb[:, 1].reshape(1, -1)) - np.maximum(za[:, 0:1], zb[:, 0].reshape(1, -1))
    inter = inter_bev * np.maximum(dz, 0.0)
    vol_a = np.array([x.volume for x in a]).reshape(-1, 1)
    vol_b = np.array([x.volume for x in b]).reshape(1, -1)
    union = vol_a + vol_b - inter
    return np.clip(np.divide(inter, union, out=np.zeros_like(inter), where=union > 0), 0.0, 1.0)


def iou_bev(a: Box3D, b: Box3D) -> float:
    return float(bev_iou_matrix([a], [b])[0, 0])


def iou_3d(a: Box3D, b: Box3D) -> float:
    return float(iou3d_matrix([a], [b])[0, 0])


def iou2d_matrix(a: Sequence[Box2D], b: Sequence[Box2D]) -> np.ndarray:
    out = np.zeros((len(a), len(b)))
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i, j] = iou_2d(x, y)
    return out


# ---------------------------------------------------------------- matching


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)  # (prediction, gt, iou)
    unmatched_predictions: list = field(default_factory=list)
    unmatched_gts: list = field(default_factory=list)

    @property
    def tp(self) -> int:
        return len(self.pairs)


def score_order(scores: Sequence[float]) -> np.ndarray:
    """Descending score, ties kept in input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def greedy_match(scores: Sequence[float], iou: np.ndarray, threshold: float) -> list[int]:
    """For each prediction (input order), the index of its matched GT or -1.

    Predictions are visited by descending score; each claims the unclaimed GT
    with the highest IoU provided it reaches ``threshold`` (lowest index on ties).
    """
    n, m = iou.shape if iou.size else (len(scores), 0)
    assigned = [-1] * n
    if m == 0:
        return assigned
    claimed = np.zeros(m, dtype=bool)
    for i in score_order(scores):
        row = np.where(claimed, -1.0, iou[i])
        j = int(np.argmax(row))
        if row[j] >= threshold and not claimed[j]:
            claimed[j] = True
            assigned[i] = j
    return assigned


def match_detections(
    preds: Sequence,
    gts: Sequence,
    iou_fn: Callable,
    threshold: float,
    score: Callable = lambda p: p.score,
) -> MatchResult:
    iou = np.array([[iou_fn(p, g) for g in gts] for p in preds]).reshape(len(preds), len(gts))
    assigned = greedy_match([score(p) for p in preds], iou, threshold)
    res = MatchResult()
    used = set()
    for i in score_order([score(p) for p in preds]):
        j = assigned[i]
        if j < 0:
            res.unmatched_predictions.append(preds[i])
        else:
            used.add(j)
            res.pairs.append((preds[i], gts[j], float(iou[i, j])))
    res.unmatched_gts = [g for j, g in enumerate(gts) if j not in used]
    return res


# ---------------------------------------------------------------- AP


def average_precision(outcomes: Sequence[tuple[float, bool]], n_gt: int):
    """All-point interpolated AP from ``(score, is_tp)`` pairs; ``NA`` when ``n_gt == 0``."""
    if n_gt <= 0:
        return NA
    if not outcomes:
        return 0.0
    scores = np.array([s for s, _ in outcomes], dtype=np.float64)
    hits = np.array([bool(t) for _, t in outcomes])[score_order(scores)]
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_ap(values) -> object:
    vals = [v for v in values if v != NA]
    return float(np.mean(vals)) if vals else NA


# ---------------------------------------------------------------- range bins / MAE


@dataclass(frozen=True)
class RangeBins:
    edges: tuple = DEFAULT_RANGE_EDGES

    def __post_init__(self):
        e = tuple(float(x) for x in self.edges)
        if len(e) < 2 or any(b <= a for a, b in zip(e, e[1:])):
            raise EvalError(f"range edges must be strictly increasing, got {e}")
        object.__setattr__(self, "edges", e)

    @property
    def labels(self) -> list[str]:
        return [f"{a:g}-{b:g}" for a, b in zip(self.edges, self.edges[1:])]

    def index(self, x: float) -> int | None:
        """Bin of ``x``: half-open ``[lo, hi)`` except the last, which is closed.

        Values outside the edges return ``None`` (overflow).
        """
        e = self.edges
        if x < e[0] or x > e[-1]:
            return None
        if x == e[-1]:
            return len(e) - 2
        return int(np.searchsorted(e, x, side="right") - 1)


def mae_by_range(pairs: Sequence[tuple[float, float]], bins: RangeBins = RangeBins(), gt_distances=None) -> dict:
    """Mean |predicted - GT| distance per bin from ``(predicted, gt)`` pairs.

    ``gt_distances`` lists every GT in scope (matched or not) and decides
    between ``N/A`` (no GT in the bin) and ``N/D`` (GT present, no pair).
    Without it, only the pairs' GTs count. ``FR`` spans all in-range pairs;
    ``overflow`` collects pairs outside the edges.
    """
    gts = [g for _, g in pairs] if gt_distances is None else list(gt_distances)
    n_bins = len(bins.edges) - 1
    errs: list[list[float]] = [[] for _ in range(n_bins)]
    overflow: list[float] = []
    for pred, gt in pairs:
        k = bins.index(gt)
        (overflow if k is None else errs[k]).append(abs(pred - gt))
    gt_count = [0] * n_bins
    gt_overflow = 0
    for g in gts:
        k = bins.index(g)
        if k is None:
            gt_overflow += 1
        else:
            gt_count[k] += 1

    def cell(values, n):
        if n == 0 and not values:
            return NA
        return float(np.mean(values)) if values else ND

    out = {lab: cell(errs[i], gt_count[i]) for i, lab in enumerate(bins.labels)}
    out["FR"] = cell([x for e in errs for x in e], sum(gt_count))
    out["overflow"] = cell(overflow, gt_overflow)
    return out


# ---------------------------------------------------------------- dataset statistics


def distance_points_stats(manifest: DatasetManifest) -> dict:
    """Per class, ``(gt_x, points inside the box)`` for every paired label.

    Frames without a readable cloud are skipped with a warning.
    """
    rows: dict[ObjectClass, list] = {}
    for f in manifest.frames:
        labels = filter_paired(f.labels)
        if not labels:
            continue
        if f.cloud_path is None or not Path(f.cloud_path).exists():
            warnings.warn(f"frame {f.frame_id}: no point cloud, skipped", MissingCloudWarning, stacklevel=2)
            continue
        # clouds and cuboids share the lidar (sensor) frame
        cloud = read_point_cloud(f.cloud_path)
        for lab in labels:
            n = points_in_box(lab.box3d, cloud)
            rows.setdefault(lab.class_id, []).append((float(lab.box3d.center[0]), n))
    return rows


def write_stats_csv(path, stats: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "gt_x", "points"])
        for cls in sorted(stats, key=lambda c: c.value):
            for x, n in sorted(stats[cls]):
                w.writerow([cls.value, repr(float(x)), n])


# ---------------------------------------------------------------- report


@dataclass(frozen=True)
class EvalConfig:
    iou_2d: float = SHORT_RANGE_IOU
    thresholds_3d: tuple = (LONG_RANGE_IOU, SHORT_RANGE_IOU)
    route_thresholds: dict = field(default_factory=lambda: {"short": SHORT_RANGE_IOU, "long": LONG_RANGE_IOU})
    mae_match_iou: float = LONG_RANGE_IOU
    range_edges: tuple = DEFAULT_RANGE_EDGES

    def __post_init__(self):
        for t in (self.iou_2d, self.mae_match_iou, *self.thresholds_3d, *self.route_thresholds.values()):
            if not (0.0 < t <= 1.0):
                raise EvalError(f"IoU threshold {t} outside (0, 1]")
        if set(self.route_thresholds) - {"short", "long"}:
            raise EvalError("route thresholds accept only 'short' and 'long'")
        RangeBins(self.range_edges)

    @property
    def bins(self) -> RangeBins:
        return RangeBins(self.range_edges)


def _thr_key(t: float) -> str:
    return f"{t:g}"


def _gt_by_frame_class(manifest: DatasetManifest) -> dict:
    out: dict = {}
    for f in manifest.frames:
        for lab in filter_paired(f.labels):
            if lab.class_id in EVAL_CLASSES:
                out.setdefault((f.frame_id, lab.class_id), []).append(lab)
    return out


def _check_frames(items, manifest: DatasetManifest) -> None:
    known = set(manifest.frame_ids)
    unknown = sorted({it.frame_id for it in items} - known)
    if unknown:
        raise EvalError(f"predictions reference unknown frames: {', '.join(unknown)}")


def _ap_table(preds_by_key, gts_by_key, frames, iou_fn, threshold, box_of_pred, box_of_gt):
    """Per-class AP with per-frame greedy matching; also returns the match lists."""
    result = {}
    for cls in EVAL_CLASSES:
        outcomes = []
        n_gt = 0
        for fid in frames:
            preds = preds_by_key.get((fid, cls), [])
            gts = gts_by_key.get((fid, cls), [])
            n_gt += len(gts)
            if not preds:
                continue
            if gts:
                iou = iou_fn([box_of_pred(p) for p in preds], [box_of_gt(g) for g in gts])
            else:
                iou = np.zeros((len(preds), 0))
            assigned = greedy_match([p.score for p in preds], iou, threshold)
            outcomes.extend((p.score, a >= 0) for p, a in zip(preds, assigned))
        result[cls.value] = average_precision(outcomes, n_gt)
    return result


def _matched_pairs(preds_by_key, gts_by_key, frames, iou_fn, threshold, box_of_pred, box_of_gt):
    pairs = []
    for key in sorted(set(preds_by_key) | set(gts_by_key), key=lambda k: (k[0], k[1].value)):
        if key[0] not in frames:
            continue
        preds = preds_by_key.get(key, [])
        gts = gts_by_key.get(key, [])
        if not preds or not gts:
            continue
        iou = iou_fn([box_of_pred(p) for p in preds], [box_of_gt(g) for g in gts])
        for p, a in zip(preds, greedy_match([p.score for p in preds], iou, threshold)):
            if a >= 0:
                pairs.append((key[1], p, gts[a]))
    return pairs


def _mae_table(pairs, gts_by_key, bins, pred_distance) -> dict:
    out = {}
    for cls in EVAL_CLASSES:
        cls_pairs = [(pred_distance(p), g.box3d.center[0]) for c, p, g in pairs if c is cls]
        gt_x = [g.box3d.center[0] for (fid, c), gs in gts_by_key.items() if c is cls for g in gs]
        out[cls.value] = mae_by_range(cls_pairs, bins, gt_x)
    return out


def build_eval_report(manifest: DatasetManifest, predictions=None, detections=None, config: EvalConfig = EvalConfig()) -> dict:
    """Score 3D head predictions and/or 2.5D detections against a manifest's paired labels.

    2.5D detections: 2D AP at ``iou_2d`` and distance MAE over pairs matched at
    that IoU. 3D predictions: BEV and 3D AP at each of ``thresholds_3d``,
    per-route AP (predictions tagged with a route against GTs sent the same
    way by their matches), and centre-x MAE over pairs matched in BEV at
    ``mae_match_iou``.
    """
    frames = list(manifest.frame_ids)
    gts = _gt_by_frame_class(manifest)
    bins = config.bins
    report: dict = {
        "report_version": REPORT_VERSION,
        "interpolation": "all-point",
        "range_bins": list(bins.edges),
        "gt_counts": {
            c.value: sum(len(v) for (fid, k), v in gts.items() if k is c) for c in EVAL_CLASSES
        },
    }

    if detections is not None:
        detections = list(detections)
        _check_frames(detections, manifest)
        by_key: dict = {}
        for d in detections:
            by_key.setdefault((d.frame_id, d.class_id), []).append(_Scored(d, d.confidence))
        ap = _ap_table(by_key, gts, frames, iou2d_matrix, config.iou_2d, lambda p: p.item.box2d, lambda g: g.box2d)
        pairs = _matched_pairs(by_key, gts, frames, iou2d_matrix, config.iou_2d, lambda p: p.item.box2d, lambda g: g.box2d)
        report["detections_2d"] = {
            "iou": config.iou_2d,
            "ap": ap,
            "map": mean_ap(ap.values()),
            "mae": _mae_table(pairs, gts, bins, lambda p: p.item.distance_m),
            "count": len(detections),
        }

    if predictions is not None:
        predictions = list(predictions)
        _check_frames(predictions, manifest)
        by_key = {}
        for p in predictions:
            by_key.setdefault((p.frame_id, p.box3d.class_id), []).append(p)
        box_p = lambda p: p.box3d  # noqa: E731
        box_g = lambda g: g.box3d  # noqa: E731
        sec: dict = {"count": len(predictions), "bev": {}, "3d": {}, "by_route": {}}
        for t in config.thresholds_3d:
            ap_bev = _ap_table(by_key, gts, frames, bev_iou_matrix, t, box_p, box_g)
            ap_3d = _ap_table(by_key, gts, frames, iou3d_matrix, t, box_p, box_g)
            sec["bev"][_thr_key(t)] = {"ap": ap_bev, "map": mean_ap(ap_bev.values())}
            sec["3d"][_thr_key(t)] = {"ap": ap_3d, "map": mean_ap(ap_3d.values())}
        for rte, t in sorted(config.route_thresholds.items()):
            sec["by_route"][rte] = _route_section(predictions, gts, frames, rte, t)
        pairs = _matched_pairs(by_key, gts, frames, bev_iou_matrix, config.mae_match_iou, box_p, box_g)
        sec["mae"] = _mae_table(pairs, gts, bins, lambda p: p.box3d.center[0])
        sec["mae_match_iou"] = config.mae_match_iou
        report["predictions_3d"] = sec
    return report


@dataclass(frozen=True)
class _Scored:
    item: object
    score: float


def _route_section(predictions, gts, frames, rte, threshold) -> dict:
    """AP of one route's predictions against the GTs that route is responsible for.

    A GT belongs to the route of the prediction that matches it best in BEV
    at the route threshold over all predictions; GTs nobody matches are
    assigned by the route of the nearest prediction centre, or left out.
    """
    by_key: dict = {}
    for p in predictions:
        by_key.setdefault((p.frame_id, p.box3d.class_id), []).append(p)
    route_gts: dict = {}
    route_preds: dict = {}
    for key, gs in gts.items():
        preds = by_key.get(key, [])
        if not preds:
            continue
        iou = bev_iou_matrix([p.box3d for p in preds], [g.box3d for g in gs])
        assigned = greedy_match([p.score for p in preds], iou, threshold)
        owner = {a: preds[i] for i, a in enumerate(assigned) if a >= 0}
        for j, g in enumerate(gs):
            p = owner.get(j)
            if p is None:
                d = [math.dist(q.box3d.center[:2], g.box3d.center[:2]) for q in preds]
                p = preds[int(np.argmin(d))]
            if p.route.value == rte:
                route_gts.setdefault(key, []).append(g)
    for key, ps in by_key.items():
        sel = [p for p in ps if p.route.value == rte]
        if sel:
            route_preds[key] = sel
    ap = _ap_table(route_preds, route_gts, frames, bev_iou_matrix, threshold, lambda p: p.box3d, lambda g: g.box3d)
    ap3 = _ap_table(route_preds, route_gts, frames, iou3d_matrix, threshold, lambda p: p.box3d, lambda g: g.box3d)
    return {"iou": threshold, "bev": {"ap": ap, "map": mean_ap(ap.values())}, "3d": {"ap": ap3, "map": mean_ap(ap3.values())}}


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1) + "\n"


def _fmt(v) -> str:
    return v if isinstance(v, str) else f"{v:.4f}"


def format_report(report: dict) -> str:
    """Aligned-column text tables for a report dict."""
    lines: list[str] = []

    def table(title, header, rows):
        widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
        lines.append(title)
        for r in [header, *rows]:
            lines.append("  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        lines.append("")

    classes = [c.value for c in EVAL_CLASSES]
    if "detections_2d" in report:
        sec = report["detections_2d"]
        table(f"2D AP @ {sec['iou']:g}", ["class", "AP"], [[c, _fmt(sec["ap"][c])] for c in classes] + [["mAP", _fmt(sec["map"])]])
        labels = [k for k in next(iter(sec["mae"].values()))]
        table("2.5D distance MAE (m)", ["class", *labels], [[c, *(_fmt(sec["mae"][c][k]) for k in labels)] for c in classes])
    if "predictions_3d" in report:
        sec = report["predictions_3d"]
        thr = sorted(sec["bev"], key=float)
        header = ["class", *(f"BEV@{t}" for t in thr), *(f"3D@{t}" for t in thr)]
        rows = [[c, *(_fmt(sec["bev"][t]["ap"][c]) for t in thr), *(_fmt(sec["3d"][t]["ap"][c]) for t in thr)] for c in classes]
        rows.append(["mAP", *(_fmt(sec["bev"][t]["map"]) for t in thr), *(_fmt(sec["3d"][t]["map"]) for t in thr)])
        table("3D AP", header, rows)
        routes = sorted(sec["by_route"])
        header = ["class", *(f"{r} BEV@{sec['by_route'][r]['iou']:g}" for r in routes), *(f"{r} 3D@{sec['by_route'][r]['iou']:g}" for r in routes)]
        rows = [[c, *(_fmt(sec["by_route"][r]["bev"]["ap"][c]) for r in routes), *(_fmt(sec["by_route"][r]["3d"]["ap"][c]) for r in routes)] for c in classes]
        table("AP by route", header, rows)
        labels = [k for k in next(iter(sec["mae"].values()))]
        table("3D centre-x MAE (m)", ["class", *labels], [[c, *(_fmt(sec["mae"][c][k]) for k in labels)] for c in classes])
    return "\n".join(lines)
