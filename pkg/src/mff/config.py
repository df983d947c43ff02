"""Pipeline configuration: one JSON document, strictly validated, with every default in the shipped file."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from mff.depth import InpaintConfig
from mff.evaluation import DEFAULT_RANGE_EDGES, EvalConfig
from mff.frustum import (
    DEFAULT_ROUTE_THRESHOLD_M,
    KITTI_ROUTE_THRESHOLDS_M,
    MAX_DISTANCE_M,
    ConfigurationError,
    FusionConfig,
)
from mff.geometry import EVAL_CLASSES

CONFIG_VERSION = 1


def _thresholds(profile: str = "default") -> dict:
    thr = {c.value: DEFAULT_ROUTE_THRESHOLD_M for c in EVAL_CLASSES}
    if profile == "kitti":
        thr.update({c.value: v for c, v in KITTI_ROUTE_THRESHOLDS_M.items()})
    return thr


@dataclass(frozen=True)
class FusionSection:
    w: float = 0.5
    route_thresholds_m: dict = field(default_factory=_thresholds)
    centroid_statistic: str = "median"
    trim_fraction: float = 0.0
    surface_compensation: bool = True


@dataclass(frozen=True)
class BevSection:
    resolution_m: float = 0.25
    length_m: float = 48.0
    width_m: float = 48.0


@dataclass(frozen=True)
class DepthSection:
    png_scale: float = 1.0 / 256.0
    sigma_floor: float = 1e-4
    solver_tolerance: float = 1e-6
    max_iterations: int = 10000
    solver: str = "cg"


@dataclass(frozen=True)
class EvalSection:
    iou_2d: float = 0.5
    thresholds_3d: list = field(default_factory=lambda: [0.1, 0.5])
    route_iou: dict = field(default_factory=lambda: {"short": 0.5, "long": 0.1})
    mae_match_iou: float = 0.1
    range_edges_m: list = field(default_factory=lambda: list(DEFAULT_RANGE_EDGES))


@dataclass(frozen=True)
class SynthSection:
    frames: int = 2
    objects_per_class: int = 4
    min_distance_m: float = 10.0
    max_distance_m: float = 240.0
    noise_sigma_m: float = 0.0


@dataclass(frozen=True)
class PipelineConfig:
    config_version: int = CONFIG_VERSION
    camera: str | None = None
    lidar: str | None = None
    seed: int = 0
    distance_span_m: list = field(default_factory=lambda: [0.0, MAX_DISTANCE_M])
    nms_iou: float = 0.25
    fusion: FusionSection = field(default_factory=FusionSection)
    bev: BevSection = field(default_factory=BevSection)
    depth: DepthSection = field(default_factory=DepthSection)
    eval: EvalSection = field(default_factory=EvalSection)
    synth: SynthSection = field(default_factory=SynthSection)

    def __post_init__(self):
        if self.config_version != CONFIG_VERSION:
            raise ConfigurationError(f"unsupported config_version {self.config_version}")
        if not (0 <= self.seed < 2**64):
            raise ConfigurationError("seed must be a u64")
        if list(self.distance_span_m) != [0.0, MAX_DISTANCE_M]:
            raise ConfigurationError(f"distance span is fixed at [0, {MAX_DISTANCE_M:g}] m")
        if not (0.0 <= self.nms_iou <= 1.0):
            raise ConfigurationError("nms_iou must lie in [0, 1]")
        if not self.bev.resolution_m > 0 or not self.bev.length_m > 0 or not self.bev.width_m > 0:
            raise ConfigurationError("BEV resolution and window must be positive")
        if not self.depth.png_scale > 0:
            raise ConfigurationError("png_scale must be positive")
        s = self.synth
        if s.frames < 1 or s.objects_per_class < 1 or not (0 < s.min_distance_m < s.max_distance_m <= MAX_DISTANCE_M):
            raise ConfigurationError("invalid synthetic scene parameters")
        if s.noise_sigma_m < 0:
            raise ConfigurationError("noise_sigma_m must be non-negative")
        # delegate the remaining checks to the modules' own validators
        try:
            self.fusion_config()
            self.inpaint_config()
            self.eval_config()
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None

    def fusion_config(self, surface_offsets: dict | None = None) -> FusionConfig:
        f = self.fusion
        return FusionConfig(
            w=f.w,
            thresholds=dict(f.route_thresholds_m),
            centroid_statistic=f.centroid_statistic,
            trim_fraction=f.trim_fraction,
            surface_offsets=(surface_offsets or {}) if f.surface_compensation else {},
        )

    def inpaint_config(self) -> InpaintConfig:
        d = self.depth
        return InpaintConfig(
            sigma_floor=d.sigma_floor,
            solver_tolerance=d.solver_tolerance,
            max_iterations=d.max_iterations,
            solver=d.solver,
        )

    def eval_config(self) -> EvalConfig:
        e = self.eval
        return EvalConfig(
            iou_2d=e.iou_2d,
            thresholds_3d=tuple(e.thresholds_3d),
            route_thresholds=dict(e.route_iou),
            mae_match_iou=e.mae_match_iou,
            range_edges=tuple(e.range_edges_m),
        )

    def replace(self, **changes) -> PipelineConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


_SECTIONS = {
    "fusion": FusionSection,
    "bev": BevSection,
    "depth": DepthSection,
    "eval": EvalSection,
    "synth": SynthSection,
}


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{where or 'config'}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigurationError(f"{where or 'config'}: unknown keys {unknown}")
    kw = {}
    for k, v in doc.items():
        if cls is PipelineConfig and k in _SECTIONS:
            v = _build(_SECTIONS[k], v, k)
        kw[k] = v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigurationError(f"{where or 'config'}: {exc}") from None


def config_from_dict(doc: dict) -> PipelineConfig:
    if "config_version" not in doc:
        raise ConfigurationError("config lacks config_version")
    return _build(PipelineConfig, doc, "")


def load_config(path=None) -> PipelineConfig:
    """Load a config file; ``None`` gives the shipped defaults.

    A partial file overrides the defaults key by key (sections merge one level deep).
    """
    base = json.loads(resources.files("mff").joinpath("data/default_config.json").read_text())
    if path is None:
        return config_from_dict(base)
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: expected a JSON object")
    if "config_version" not in doc:
        raise ConfigurationError(f"{path}: config lacks config_version")
    merged = dict(base)
    for k, v in doc.items():
        if k in _SECTIONS and isinstance(v, dict) and isinstance(base.get(k), dict):
            merged[k] = {**base[k], **v}
        else:
            merged[k] = v
    return config_from_dict(merged)


def kitti_profile() -> PipelineConfig:
    cfg = load_config()
    return cfg.replace(fusion=dataclasses.replace(cfg.fusion, route_thresholds_m=_thresholds("kitti")))
