import json
from pathlib import Path

import pytest

from mff import config
from mff.config import PipelineConfig, config_from_dict, kitti_profile, load_config
from mff.frustum import ConfigurationError, FusionConfig
from mff.geometry import ObjectClass

GOLDEN = Path(__file__).parent / "golden" / "default_config.json"


def test_shipped_defaults_match_golden():
    assert load_config().to_dict() == json.loads(GOLDEN.read_text())
    assert load_config().to_json() == GOLDEN.read_text()


def test_dataclass_defaults_match_shipped_file():
    # the dataclass defaults and the shipped JSON must not drift apart
    assert PipelineConfig().to_dict() == load_config().to_dict()


def test_protocol_constants():
    cfg = load_config()
    assert cfg.eval.range_edges_m == [0.0, 50.0, 100.0, 150.0, 200.0, 250.0]
    assert cfg.eval.route_iou == {"short": 0.5, "long": 0.1}
    assert sorted(cfg.eval.thresholds_3d) == [0.1, 0.5]
    assert cfg.distance_span_m == [0.0, 250.0]
    assert set(cfg.fusion.route_thresholds_m.values()) == {100.0}
    fc = cfg.fusion_config()
    assert fc.w == 0.5 and fc.thresholds[ObjectClass.PERSON] == 100.0


def test_kitti_profile():
    thr = kitti_profile().fusion.route_thresholds_m
    assert thr["person"] == 60.0 and thr["road_vehicle"] == 75.0
    assert thr["signal_pole"] == 100.0
    shipped = json.loads(
        (Path(config.__file__).parent / "data" / "kitti_profile.json").read_text()
    )
    assert config_from_dict(shipped) == kitti_profile()
    assert FusionConfig.kitti_profile().thresholds == kitti_profile().fusion_config().thresholds


def _write(tmp_path, doc):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    return p


def test_partial_file_merges_over_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, {"config_version": 1, "seed": 9, "fusion": {"w": 0.25}}))
    assert cfg.seed == 9 and cfg.fusion.w == 0.25
    assert cfg.fusion.centroid_statistic == "median"
    assert cfg.eval == load_config().eval


@pytest.mark.parametrize(
    "doc",
    [
        {"config_version": 1, "colour": "red"},
        {"config_version": 1, "fusion": {"weight": 0.5}},
        {"config_version": 2},
        {"seed": 1},
        {"config_version": 1, "fusion": {"w": 1.5}},
        {"config_version": 1, "distance_span_m": [0, 300]},
        {"config_version": 1, "eval": {"range_edges_m": [0, 50, 40]}},
        {"config_version": 1, "depth": {"solver": "jacobi"}},
        {"config_version": 1, "nms_iou": -0.1},
        {"config_version": 1, "fusion": {"route_thresholds_m": {"person": 60}}},
    ],
)
def test_invalid_configs_rejected(tmp_path, doc):
    with pytest.raises(ConfigurationError):
        load_config(_write(tmp_path, doc))


def test_unknown_key_is_named():
    doc = json.loads(GOLDEN.read_text())
    doc["bev"]["voxel"] = 1
    with pytest.raises(ConfigurationError, match="voxel"):
        config_from_dict(doc)


def test_not_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{nope")
    with pytest.raises(ConfigurationError):
        load_config(p)
