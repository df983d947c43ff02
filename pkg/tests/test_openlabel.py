import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mff.geometry import SENSOR_TO_OPTICAL, Box2D, Box3D, CameraCalibration, CameraIntrinsics, ObjectClass, PointCloud
from mff.openlabel import (
    CalibrationError,
    FrameAnnotation,
    ManifestError,
    MissingCalibrationWarning,
    NonFinitePointsWarning,
    ObjectLabel,
    OpenLabelError,
    OpenLabelParseError,
    OpenLabelSchemaError,
    PointCloudFormatError,
    build_manifest,
    cuboid_to_box,
    filter_paired,
    load_class_map,
    load_manifest,
    manifest_to_json,
    parse_openlabel,
    read_point_cloud,
    save_manifest,
    to_openlabel,
    write_point_cloud,
)

from conftest import FIXTURES

K = CameraIntrinsics(1000.0, 1000.0, 960.0, 540.0, 1920, 1080)


def read(name):
    return (FIXTURES / name).read_text()


# ---------------------------------------------------------------- parsing


def test_person_fixture():
    (frame,) = parse_openlabel(read("person_single.json"))
    assert frame.frame_id == "7"
    (lab,) = frame.labels
    assert lab.class_id is ObjectClass.PERSON and lab.paired
    assert lab.box2d.as_tuple() == (940.0, 440.0, 980.0, 560.0)
    assert lab.box3d.center == (20.0, 0.0, -0.3)
    assert lab.box3d.dims == (0.6, 0.7, 1.75)
    assert lab.box3d.yaw == pytest.approx(math.pi / 6, abs=1e-9)
    assert frame.cloud_path == "clouds/7.pclb" and frame.image_path == "images/7.png"
    calib = frame.camera_calibration()
    assert calib.intrinsics == K
    assert calib.sensor_to_camera.allclose(SENSOR_TO_OPTICAL, 1e-12)


def test_empty_objects():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MissingCalibrationWarning)
        (frame,) = parse_openlabel(read("empty_objects.json"))
    assert frame.labels == ()


def test_missing_calibration_warns_and_keeps_frame():
    with pytest.warns(MissingCalibrationWarning):
        frames = parse_openlabel(read("mixed_classes.json"))
    assert [f.frame_id for f in frames] == ["2", "10"]
    assert frames[1].camera_calibration() is None


@given(st.floats(-math.pi + 1e-6, math.pi))
def test_quaternion_yaw(theta):
    box, tilted = cuboid_to_box([0, 0, 0, 0, 0, math.sin(theta / 2), math.cos(theta / 2), 1, 1, 1], ObjectClass.PERSON)
    assert abs(math.remainder(box.yaw - theta, 2 * math.pi)) <= 1e-9
    assert not tilted


def test_euler_encoding_and_tilt():
    box, tilted = cuboid_to_box([1, 2, 3, 0, 0, 0.4, 2, 1, 1.5], ObjectClass.BUFFER_STOP)
    assert box.yaw == pytest.approx(0.4) and not tilted
    _, tilted = cuboid_to_box([1, 2, 3, 0.2, 0, 0.4, 2, 1, 1.5], ObjectClass.BUFFER_STOP)
    assert tilted


@pytest.mark.filterwarnings("ignore::mff.openlabel.MissingCalibrationWarning")
def test_cuboid_wrong_length_names_object():
    with pytest.raises(OpenLabelSchemaError) as err:
        parse_openlabel(read("bad_cuboid.json"))
    assert err.value.object_id == "pole-9"
    for n in (8, 11, 12):
        with pytest.raises(OpenLabelSchemaError):
            cuboid_to_box([1.0] * n, ObjectClass.PERSON, "x")


def test_malformed_json_position():
    with pytest.raises(OpenLabelParseError) as err:
        parse_openlabel(read("malformed.json"))
    assert err.value.line == 3 and err.value.column > 1


def test_unknown_class_tagged_other_and_tilt_counted():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MissingCalibrationWarning)
        frames = parse_openlabel(read("mixed_classes.json"))
    labs = {lab.object_id: lab for lab in frames[1].labels}
    assert labs["t1"].class_id is ObjectClass.OTHER and labs["t1"].source_class == "train"
    assert labs["b1"].class_id is ObjectClass.BUFFER_STOP
    assert frames[1].tilt_warnings == 1


def test_several_cameras_need_selection():
    with pytest.raises(OpenLabelSchemaError):
        parse_openlabel(read("two_cameras.json"))
    (fa,) = parse_openlabel(read("two_cameras.json"), camera="cam_a")
    (fb,) = parse_openlabel(read("two_cameras.json"), camera="cam_b")
    assert fa.labels[0].box2d.as_tuple() == (40.0, 35.0, 60.0, 45.0)
    assert fb.labels[0].box2d.as_tuple() == (48.0, 34.0, 72.0, 46.0)
    assert fa.camera_calibration().intrinsics.fx == 50 and fb.camera_calibration().intrinsics.fx == 60


def test_distortion_rejected_unless_ignored():
    with pytest.raises(CalibrationError):
        parse_openlabel(read("distorted.json"))
    parse_openlabel(read("distorted.json"), ignore_distortion=True)


def test_non_openlabel_document():
    with pytest.raises(OpenLabelSchemaError):
        parse_openlabel('{"foo": 1}')


def test_parse_total_over_fixtures():
    for path in sorted(FIXTURES.glob("*.json")):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                frames = parse_openlabel(path.read_text())
            assert isinstance(frames, list)
        except OpenLabelError:
            pass


def test_class_map_is_data():
    m = load_class_map()
    assert m["road_vehicle"] is ObjectClass.ROAD_VEHICLE
    assert {v for v in m.values()} == set(ObjectClass) - {ObjectClass.OTHER}


def test_custom_class_map(tmp_path):
    p = tmp_path / "map.json"
    p.write_text(json.dumps({"train": "road_vehicle"}))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        frames = parse_openlabel(read("mixed_classes.json"), class_map=load_class_map(p))
    labs = {lab.object_id: lab for lab in frames[1].labels}
    assert labs["t1"].class_id is ObjectClass.ROAD_VEHICLE
    assert labs["s1"].class_id is ObjectClass.OTHER


# ---------------------------------------------------------------- pairing


def _label(oid, two=True, three=True):
    return ObjectLabel(
        oid,
        ObjectClass.PERSON,
        Box2D(0, 0, 1, 1) if two else None,
        Box3D((1, 0, 0), (1, 1, 1), 0) if three else None,
    )


def test_filter_paired_examples():
    two, three, both = _label("a", three=False), _label("b", two=False), _label("c")
    assert filter_paired([two, three, both]) == [both]
    assert filter_paired([]) == []
    five = [_label(str(i)) for i in range(5)]
    assert filter_paired(five) == five


@given(st.lists(st.tuples(st.booleans(), st.booleans()).filter(any), max_size=20))
def test_filter_paired_idempotent(flags):
    labs = [_label(str(i), a, b) for i, (a, b) in enumerate(flags)]
    once = filter_paired(labs)
    assert filter_paired(once) == once
    assert all(lab.paired for lab in once)
    assert len(once) == sum(a and b for a, b in flags)


def test_label_needs_a_box():
    with pytest.raises(OpenLabelSchemaError):
        ObjectLabel("x", ObjectClass.PERSON)


# ---------------------------------------------------------------- round trip


def _frames_strategy():
    box3 = st.builds(
        lambda c, d, y, cls: Box3D(c, d, y, cls),
        st.tuples(*[st.floats(-200, 200)] * 3),
        st.tuples(*[st.floats(0.1, 30)] * 3),
        st.floats(-math.pi, math.pi),
        st.sampled_from(list(ObjectClass)[:5]),
    )
    box2 = st.builds(
        lambda x, y, w, h: Box2D(x, y, x + w, y + h),
        st.floats(0, 1800),
        st.floats(0, 1000),
        st.floats(1, 100),
        st.floats(1, 70),
    )
    return st.lists(st.tuples(st.one_of(st.none(), box2), box3), min_size=0, max_size=6)


@given(_frames_strategy(), st.integers(0, 10_000))
def test_openlabel_round_trip(items, key):
    calib = {"cam": CameraCalibration(K, SENSOR_TO_OPTICAL)}
    labels = tuple(
        ObjectLabel(f"o{i}", b3.class_id, b2, Box3D(b3.center, b3.dims, b3.yaw, b3.class_id), "cam" if b2 else "lidar")
        for i, (b2, b3) in enumerate(items)
    )
    frame = FrameAnnotation(f"seq_{key}", labels, calib, "c.pclb", "i.png", "cam", "lidar")
    doc = json.dumps(to_openlabel([frame], sequence="seq"))
    (back,) = parse_openlabel(doc, camera="cam", lidar="lidar", sequence="seq")
    assert back.frame_id == frame.frame_id
    assert (back.cloud_path, back.image_path) == (frame.cloud_path, frame.image_path)
    assert back.calibration["cam"].intrinsics == K
    assert back.calibration["cam"].sensor_to_camera.allclose(SENSOR_TO_OPTICAL, 1e-12)
    assert len(back.labels) == len(labels)
    for a, b in zip(sorted(labels, key=lambda x: x.object_id), back.labels):
        assert (a.object_id, a.class_id) == (b.object_id, b.class_id)
        if a.box2d is None:
            assert b.box2d is None
        else:
            np.testing.assert_allclose(a.box2d.as_tuple(), b.box2d.as_tuple(), atol=1e-12 * 2000)
        np.testing.assert_allclose(a.box3d.center, b.box3d.center, atol=1e-12)
        np.testing.assert_allclose(a.box3d.dims, b.box3d.dims, atol=1e-12)
        assert abs(math.remainder(a.box3d.yaw - b.box3d.yaw, 2 * math.pi)) <= 1e-12


def test_to_openlabel_rejects_conflicting_types():
    a = ObjectLabel("same", ObjectClass.PERSON, Box2D(0, 0, 1, 1))
    b = ObjectLabel("same", ObjectClass.SIGNAL_POLE, Box2D(0, 0, 1, 1))
    with pytest.raises(OpenLabelError):
        to_openlabel([FrameAnnotation("1", (a,)), FrameAnnotation("2", (b,))])


# ---------------------------------------------------------------- point clouds


def test_pclb_three_records_bit_exact(tmp_path):
    pts = np.array([[1.5, -2.25, 3.0], [100.125, 0.0, -1.0], [7.0, 8.0, 9.0]])
    write_point_cloud(tmp_path / "c.pclb", PointCloud(pts, [0.0, 0.5, 1.0]))
    raw = (tmp_path / "c.pclb").read_bytes()
    assert raw[:4] == b"PCLB" and int.from_bytes(raw[4:8], "little") == 3 and raw[8] == 4
    c = read_point_cloud(tmp_path / "c.pclb")
    np.testing.assert_array_equal(c.points, pts)
    np.testing.assert_array_equal(c.intensity, [0.0, 0.5, 1.0])


def test_pclb_empty(tmp_path):
    write_point_cloud(tmp_path / "e.pclb", PointCloud.empty())
    assert len(read_point_cloud(tmp_path / "e.pclb")) == 0


def test_pclb_nan_dropped(tmp_path):
    p = tmp_path / "n.pclb"
    body = np.array([[np.nan, 0, 0], [1, 2, 3]], dtype="<f4").tobytes()
    p.write_bytes(b"PCLB" + (2).to_bytes(4, "little") + bytes([3]) + body)
    with pytest.warns(NonFinitePointsWarning) as rec:
        c = read_point_cloud(p)
    assert rec[0].message.count == 1
    np.testing.assert_array_equal(c.points, [[1, 2, 3]])


def test_pclb_truncated_offset(tmp_path):
    write_point_cloud(tmp_path / "t.pclb", PointCloud(np.ones((3, 3))))
    raw = (tmp_path / "t.pclb").read_bytes()
    (tmp_path / "u.pclb").write_bytes(raw[:-5])
    with pytest.raises(PointCloudFormatError) as err:
        read_point_cloud(tmp_path / "u.pclb")
    assert err.value.offset == 9 + 2 * 12


def test_ascii_fallback(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("# comment\n1 2 3 0.5\n4 5 6 1.0\nnan 1 1 0\n")
    with pytest.warns(NonFinitePointsWarning):
        c = read_point_cloud(p)
    np.testing.assert_array_equal(c.points, [[1, 2, 3], [4, 5, 6]])
    np.testing.assert_array_equal(c.intensity, [0.5, 1.0])
    p.write_text("1 2 3\n1 2\n")
    with pytest.raises(PointCloudFormatError) as err:
        read_point_cloud(p)
    assert err.value.offset == 6


# ---------------------------------------------------------------- manifests


def make_tree(root, frames=("1", "2", "3", "4"), splits=None, skip_cloud=None):
    calib = {"cam": CameraCalibration(K, SENSOR_TO_OPTICAL)}
    (root / "labels").mkdir(parents=True)
    (root / "clouds").mkdir()
    out = []
    for i, key in enumerate(frames):
        lab = ObjectLabel(
            f"s_{key}_p", ObjectClass.PERSON, Box2D(900, 400, 1000, 600), Box3D((20 + i, 0, 0), (0.6, 0.7, 1.8), 0, "person")
        )
        if key != skip_cloud:
            write_point_cloud(root / "clouds" / f"{key}.pclb", PointCloud(np.ones((2, 3))))
        out.append(FrameAnnotation(f"s_{key}", (lab,), calib, f"clouds/{key}.pclb", None, "cam", "lidar"))
    (root / "labels" / "s.json").write_text(json.dumps(to_openlabel(out, sequence="s")))
    splits = splits or {"train": ["s_1", "s_3"], "val": ["s_2"], "test": ["s_4"]}
    (root / "splits.json").write_text(json.dumps(splits))
    return root


def test_build_manifest_split_sizes(tmp_path):
    m = build_manifest(make_tree(tmp_path))
    assert [len(m[s].frames) for s in ("train", "val", "test")] == [2, 1, 1]
    assert m["train"].frame_ids == ["s_1", "s_3"]
    assert m["train"].class_histogram == {"person": 2}
    assert m["test"].frames[0].cloud_path == str(tmp_path.resolve() / "clouds" / "4.pclb")


def test_build_manifest_overlap(tmp_path):
    root = make_tree(tmp_path, splits={"train": ["s_1", "s_2"], "val": ["s_2"], "test": []})
    with pytest.raises(ManifestError, match="s_2"):
        build_manifest(root)


def test_build_manifest_missing_cloud(tmp_path):
    root = make_tree(tmp_path, skip_cloud="3")
    with pytest.raises(ManifestError, match="3.pclb"):
        build_manifest(root)


def test_manifest_serialisation_stable(tmp_path):
    root = make_tree(tmp_path)
    a = build_manifest(root)
    b = build_manifest(root, jobs=4)
    for s in ("train", "val", "test"):
        assert manifest_to_json(a[s]) == manifest_to_json(b[s])
        save_manifest(a[s], tmp_path / f"{s}.json")
        back = load_manifest(tmp_path / f"{s}.json")
        assert manifest_to_json(back) == manifest_to_json(a[s])
    doc = json.loads(manifest_to_json(a["train"]))
    assert doc["manifest_version"] == 1


def test_manifest_version_checked(tmp_path):
    root = make_tree(tmp_path)
    m = build_manifest(root)["val"]
    doc = json.loads(manifest_to_json(m))
    doc["manifest_version"] = 2
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "bad.json")


def test_manifest_splits_disjoint(synth_manifests):
    ids = [set(m.frame_ids) for m in synth_manifests.values()]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
