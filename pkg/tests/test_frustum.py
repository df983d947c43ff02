import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mff.depth import DepthMap, quantization_step
from mff.frustum import (
    ConfigurationError,
    Detection25D,
    DetectionFormatError,
    EmptyFrustumError,
    FrameTag,
    Frustum,
    FrustumError,
    FrustumStateError,
    FusionConfig,
    Route,
    backproject_depth_map,
    denormalize_distance,
    extract_frustum,
    from_frustum_frame,
    fuse_distance,
    huber,
    normalize_distance,
    rasterize_bev,
    read_detections,
    route,
    synthetic_frustum,
    to_frustum_frame,
    write_bev,
    write_detections,
)
from mff.geometry import (
    EVAL_CLASSES,
    SENSOR_TO_OPTICAL,
    Box2D,
    Box3D,
    CameraIntrinsics,
    ObjectClass,
    PointCloud,
    RigidTransform,
    invert,
)
from mff.heads import FALLBACK_DIMS
from mff.synth import default_camera, projected_box, render_frame

SMALL = CameraIntrinsics(20.0, 20.0, 8.0, 6.0, 16, 12)
CAM_TO_SENSOR = invert(SENSOR_TO_OPTICAL)


def det(box=(4, 3, 12, 9), cls="person", dist=100.0, conf=0.9):
    return Detection25D(Box2D(*box), ObjectClass.parse(cls), conf, dist, "f")


def frustum_with(points, fused, az=0.0, tag=FrameTag.FRUSTUM, cls="person", lateral=0.0):
    return Frustum(det(cls=cls), PointCloud(points), fused, fused, az, tag, lateral)


# ---------------------------------------------------------------- types


def test_detection_range_checked():
    with pytest.raises(FrustumError):
        det(dist=251.0)
    with pytest.raises(FrustumError):
        det(conf=1.5)


def test_fusion_config_defaults():
    cfg = FusionConfig()
    assert cfg.w == 0.5 and cfg.centroid_statistic == "median" and cfg.trim_fraction == 0
    assert cfg.thresholds == {c: 100.0 for c in EVAL_CLASSES}
    kitti = FusionConfig.kitti_profile()
    assert kitti.thresholds[ObjectClass.PERSON] == 60.0 and kitti.thresholds[ObjectClass.ROAD_VEHICLE] == 75.0
    assert kitti.thresholds[ObjectClass.SIGNAL_POLE] == 100.0


@pytest.mark.parametrize(
    "kw",
    [{"w": 1.5}, {"centroid_statistic": "mode"}, {"trim_fraction": 0.25}, {"thresholds": {"person": 50.0}}],
)
def test_fusion_config_validation(kw):
    with pytest.raises(ConfigurationError):
        FusionConfig(**kw)


# ---------------------------------------------------------------- back-projection


def test_backproject_all_invalid():
    assert len(backproject_depth_map(DepthMap(np.full((4, 4), np.nan)), SMALL, RigidTransform.identity())) == 0


def test_backproject_2x2():
    k = CameraIntrinsics(1.0, 1.0, 0.5, 0.5, 2, 2)
    c = backproject_depth_map(DepthMap(np.full((2, 2), 10.0)), k, RigidTransform.identity())
    assert len(c) == 4 and np.all(c.points[:, 2] == 10.0)


def test_backproject_stride():
    k = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 4, 4)
    c = backproject_depth_map(DepthMap(np.full((4, 4), 1.0)), k, RigidTransform.identity(), stride=2)
    # (u, v) = (col, row) pixel origins in row-major order
    np.testing.assert_array_equal(c.points[:, :2], [[0, 0], [2, 0], [0, 2], [2, 2]])


def test_backproject_to_sensor_frame():
    d = np.full((12, 16), np.nan)
    d[6, 8] = 30.0
    c = backproject_depth_map(DepthMap(d), SMALL, CAM_TO_SENSOR)
    np.testing.assert_allclose(c.points, [[30.0, 0.0, 0.0]], atol=1e-12)


# ---------------------------------------------------------------- extraction and fusion


def test_agreement_case():
    for w in (0.0, 0.3, 1.0):
        f = extract_frustum(det(dist=100.0), DepthMap(np.full((12, 16), 100.0)), SMALL, CAM_TO_SENSOR, FusionConfig(w=w))
        assert f.fused_distance == pytest.approx(100.0)


def test_weighted_sum_examples():
    assert fuse_distance(120.0, 100.0, 0.5) == 110.0
    f = extract_frustum(det(dist=100.0), DepthMap(np.full((12, 16), 120.0)), SMALL, CAM_TO_SENSOR, FusionConfig(w=1.0))
    assert f.fused_distance == f.centroid_distance == pytest.approx(120.0)
    f = extract_frustum(det(dist=100.0), DepthMap(np.full((12, 16), 120.0)), SMALL, CAM_TO_SENSOR)
    assert f.fused_distance == pytest.approx(110.0)


@given(st.floats(0, 1), st.floats(1, 250), st.floats(0, 250))
def test_fused_is_exact_weighted_sum(w, c, dd):
    assert fuse_distance(c, dd, w) == w * c + (1 - w) * dd


@given(st.floats(1, 250), st.floats(0, 250))
def test_fused_monotone_in_w(c, dd):
    ws = np.linspace(0, 1, 21)
    vals = [fuse_distance(c, dd, w) for w in ws]
    diffs = np.diff(vals)
    if c >= dd:
        assert np.all(diffs >= -1e-12)
    else:
        assert np.all(diffs <= 1e-12)


def test_azimuth_from_fused_centre():
    d = np.full((12, 16), 50.0)
    f = extract_frustum(det(box=(0, 0, 6, 12), dist=40.0), DepthMap(d), SMALL, CAM_TO_SENSOR)
    assert f.centroid_lateral > 0
    assert f.azimuth == pytest.approx(math.atan2(f.centroid_lateral, f.fused_distance))


def test_median_and_trim():
    d = np.full((12, 16), 50.0)
    d[3, 4:12] = 200.0  # background bleed in one row
    base = extract_frustum(det(dist=50.0), DepthMap(d), SMALL, CAM_TO_SENSOR, FusionConfig(centroid_statistic="mean"))
    med = extract_frustum(det(dist=50.0), DepthMap(d), SMALL, CAM_TO_SENSOR)
    trim = extract_frustum(
        det(dist=50.0), DepthMap(d), SMALL, CAM_TO_SENSOR, FusionConfig(centroid_statistic="mean", trim_fraction=0.2)
    )
    assert base.centroid_distance > 60
    assert med.centroid_distance == pytest.approx(50.0)
    assert trim.centroid_distance == pytest.approx(50.0)
    assert len(trim.points) < len(base.points)


def test_empty_frustum_and_fallback():
    d = DepthMap(np.full((12, 16), np.nan))
    with pytest.raises(EmptyFrustumError):
        extract_frustum(det(dist=80.0), d, SMALL, CAM_TO_SENSOR)
    f = synthetic_frustum(det(dist=80.0), SMALL, CAM_TO_SENSOR)
    assert f.synthetic and len(f.points) == 1
    assert f.points.points[0, 0] == pytest.approx(80.0)
    assert f.fused_distance == 80.0


def test_box_outside_image_rejected():
    with pytest.raises(FrustumError):
        extract_frustum(det(box=(4, 3, 17, 9)), DepthMap(np.full((12, 16), 5.0)), SMALL, CAM_TO_SENSOR)


# ---------------------------------------------------------------- routing


@pytest.mark.parametrize("fused,expected", [(110.0, Route.LONG), (100.0, Route.SHORT), (50.0, Route.SHORT)])
def test_route_examples(fused, expected):
    r = route(frustum_with(np.zeros((1, 3)), fused, tag=FrameTag.SENSOR))
    assert r.route is expected and r.threshold_used == 100.0 and r.fused_distance == fused


def test_route_unknown_class():
    with pytest.raises(ConfigurationError):
        route(frustum_with(np.zeros((1, 3)), 10.0, cls="other"))


@given(st.floats(0, 250), st.floats(0, 250), st.floats(0, 100))
def test_route_monotone_in_threshold(fused, thr, bump):
    f = frustum_with(np.zeros((1, 3)), fused, tag=FrameTag.SENSOR)
    low = FusionConfig(thresholds={c: thr for c in EVAL_CLASSES})
    high = FusionConfig(thresholds={c: thr + bump for c in EVAL_CLASSES})
    a, b = route(f, low), route(f, high)
    assert (a.route is Route.LONG) == (fused > thr)
    assert not (a.route is Route.SHORT and b.route is Route.LONG)


# ---------------------------------------------------------------- frustum frame


def test_to_frustum_frame_identity_at_zero():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    out = to_frustum_frame(frustum_with(pts, 5.0, 0.0, FrameTag.SENSOR))
    np.testing.assert_array_equal(out.points.points, pts)
    assert out.frame_tag is FrameTag.FRUSTUM


def test_to_frustum_frame_centroid_example():
    f = frustum_with([[10.0, 10.0, 0.0]], 10.0, math.pi / 4, FrameTag.SENSOR, lateral=10.0)
    out = to_frustum_frame(f)
    np.testing.assert_allclose(out.points.points[0], (14.142135, 0, 0), atol=1e-5)
    assert out.fused_range == pytest.approx(14.1421356, abs=1e-6)


def test_to_frustum_frame_twice():
    f = to_frustum_frame(frustum_with(np.zeros((1, 3)), 5.0, 0.3, FrameTag.SENSOR))
    with pytest.raises(FrustumStateError):
        to_frustum_frame(f)


@given(st.integers(0, 2**31), st.floats(-math.pi, math.pi))
def test_frustum_frame_round_trip_and_rigidity(seed, az):
    pts = np.random.default_rng(seed).uniform(-200, 200, (30, 3))
    f = frustum_with(pts, 5.0, az, FrameTag.SENSOR)
    g = to_frustum_frame(f)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(g.points.points[:, None] - g.points.points[None], axis=-1)
    assert np.max(np.abs(d0 - d1)) <= 1e-9
    np.testing.assert_allclose(from_frustum_frame(g).points.points, pts, atol=1e-9)
    assert g.fused_distance == f.fused_distance and len(g.points) == len(f.points)


def test_fused_centre_on_x_axis():
    d = np.full((12, 16), 50.0)
    f = extract_frustum(det(box=(0, 0, 6, 12), dist=40.0), DepthMap(d), SMALL, CAM_TO_SENSOR)
    centre = np.array([f.fused_distance, f.centroid_lateral, 0.0])
    from mff.geometry import frustum_frame_for

    np.testing.assert_allclose(frustum_frame_for(f.azimuth).apply(centre), (f.fused_range, 0, 0), atol=1e-12)


# ---------------------------------------------------------------- BEV


def test_bev_default_shape_and_single_point():
    g = rasterize_bev(frustum_with([[120.0, 0.0, 1.7]], 120.0))
    assert g.cells.shape == (192, 192, 3)
    assert g.density[96, 96] == 1 and g.max_height[96, 96] == pytest.approx(1.7)
    assert g.density.sum() == 1 and g.occupancy[96, 96] == 1
    assert g.class_prior.tolist() == [1, 0, 0, 0, 0]


def test_bev_far_edges_in_last_cell():
    g = rasterize_bev(frustum_with([[124.0, 24.0, 0.0], [76.0, -24.0, 0.0]], 100.0))
    assert g.density[191, 191] == 1 and g.density[0, 0] == 1 and g.dropped == 0


def test_bev_needs_frustum_frame():
    with pytest.raises(FrustumStateError):
        rasterize_bev(frustum_with([[1.0, 0, 0]], 1.0, tag=FrameTag.SENSOR))


@given(st.integers(0, 2**31), st.sampled_from([0.1, 0.25, 0.5, 1.0]))
def test_bev_conservation(seed, res):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(50, 150, 500), rng.uniform(-40, 40, 500), rng.uniform(-2, 4, 500)])
    g = rasterize_bev(frustum_with(pts, 100.0), res)
    inside = (np.abs(pts[:, 0] - 100) <= 24) & (np.abs(pts[:, 1]) <= 24)
    assert g.density.sum() == inside.sum()
    assert g.dropped + g.density.sum() == len(pts)
    np.testing.assert_array_equal(g.occupancy, (g.density > 0).astype(float))
    assert np.all(g.max_height[g.density == 0] == 0)


def test_bev_export(tmp_path):
    g = rasterize_bev(frustum_with([[120.0, 0.0, 1.7]], 120.0, cls="signal_pole"))
    paths = write_bev(tmp_path / "b", g)
    side = json.loads(paths[-1].read_text())
    assert side["resolution"] == 0.25 and side["class_prior"] == [0, 0, 0, 0, 1]
    assert side["window"] == {"x": [96.0, 144.0], "y": [-24.0, 24.0]}
    assert len(paths) == 4


# ---------------------------------------------------------------- utilities


def test_normalize_examples():
    assert normalize_distance(125.0) == 0.5
    assert normalize_distance(0.0) == 0.0 and normalize_distance(250.0) == 1.0
    rng = np.random.default_rng(0)
    for d in rng.uniform(0, 250, 100):
        assert abs(denormalize_distance(normalize_distance(d)) - d) <= 1e-12
    with pytest.raises(FrustumError):
        normalize_distance(-1)
    with pytest.raises(FrustumError):
        denormalize_distance(1.01)


def test_huber_examples():
    assert huber(0.5, 1.0) == 0.125
    assert huber(2.0, 1.0) == 1.5
    with pytest.raises(ValueError):
        huber(1.0, 0.0)


@given(st.floats(-1e3, 1e3), st.floats(0.01, 10))
def test_huber_symmetric_and_continuous(r, delta):
    assert huber(r, delta) == huber(-r, delta)
    assert huber(delta, delta) == pytest.approx(0.5 * delta * delta)


# ---------------------------------------------------------------- detections IO


def test_detections_round_trip(tmp_path):
    dets = [det(dist=12.5), det(box=(1, 1, 3, 3), cls="signal_pole", dist=240.0, conf=0.1)]
    write_detections(tmp_path / "d.jsonl", dets)
    assert read_detections(tmp_path / "d.jsonl") == dets


@pytest.mark.parametrize(
    "line,field",
    [
        ('{"frame_id": "a", "class": "person", "x1": 0, "y1": 0, "x2": 1, "y2": 1, "confidence": 1}', "distance_m"),
        ('{"frame_id": "a", "class": "tram", "x1": 0, "y1": 0, "x2": 1, "y2": 1, "confidence": 1, "distance_m": 3}', "class"),
        ('{"frame_id": "a", "class": "person", "x1": 0, "y1": 0, "x2": 1, "y2": 1, "confidence": 1, "distance_m": 300}', "distance_m"),
        ('{"frame_id": "a", "class": "person", "x1": 0, "y1": 0, "x2": 1, "y2": 1, "confidence": 2, "distance_m": 3}', "confidence"),
    ],
)
def test_detections_schema_errors(tmp_path, line, field):
    p = tmp_path / "d.jsonl"
    p.write_text("\n" + line + "\n")
    with pytest.raises(DetectionFormatError) as err:
        read_detections(p)
    assert err.value.line == 2 and err.value.field == field


# ---------------------------------------------------------------- end-to-end consistency


def _rendered_frustum(cls, x, az, k):
    l, w, h = FALLBACK_DIMS[cls]
    box = Box3D((x, x * math.tan(az), -1.2 + h / 2), (l, w, h), az, cls)
    b2 = projected_box(box, k)
    depth, _ = render_frame([box], [b2], k)
    # DMAP storage precision
    depth = DepthMap(depth.values.astype(np.float32).astype(np.float64))
    cfg = FusionConfig(surface_offsets={cls: l / 2})
    return box, extract_frustum(Detection25D(b2, cls, 1.0, x), depth, k, CAM_TO_SENSOR, cfg)


@pytest.mark.parametrize("cls", EVAL_CLASSES)
@pytest.mark.parametrize("x", [25.0, 60.0, 99.0, 150.0, 230.0])
def test_centroid_matches_object_centre_on_axis(cls, x):
    box, f = _rendered_frustum(cls, x, 0.0, default_camera())
    assert abs(f.centroid_distance - box.center[0]) <= quantization_step(box.center[0])


@pytest.mark.parametrize("cls", EVAL_CLASSES)
@pytest.mark.parametrize("az", [-0.3, 0.1, 0.3])
def test_centroid_close_to_object_centre_off_axis(cls, az):
    # off the optical axis the visible face is sampled unevenly, so the bound is looser
    for x in (25.0, 150.0):
        box, f = _rendered_frustum(cls, x, az, default_camera())
        assert abs(f.centroid_distance - box.center[0]) <= 0.05
        assert abs(f.centroid_lateral - box.center[1]) <= 0.05
