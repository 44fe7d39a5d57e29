"""Scenario documents: scene, scan, noise, pipeline choice and module parameters.

A scenario is a YAML mapping.  Every section is optional except
``schema_version`` and ``seed``; omitted values take the defaults below.
``--override a.b=value`` edits one nested key, parsing ``value`` as YAML.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from evgrasp.events import Box, CameraModel, Scene, Trajectory, look_down_pose
from evgrasp.evaluation import Limits
from evgrasp.grasp import GripperModel
from evgrasp.mems import MemsConfig
from evgrasp.servoing import ServoGains

SCHEMA_VERSION = 1
PIPELINES = ("model-based", "model-free")
REFERENCE_SIZES = ((0.15, 0.10, 0.12), (0.15, 0.10, 0.10), (0.10, 0.07, 0.08))


class ConfigError(ValueError):
    """Invalid scenario document or override."""


@dataclass
class CameraSpec:
    focal: float = 300.0
    width: int = 346
    height: int = 260
    contrast_threshold: float = 0.15

    def build(self) -> CameraModel:
        return CameraModel.pinhole(self.focal, width=self.width, height=self.height,
                                   contrast_threshold=self.contrast_threshold)


@dataclass
class BoxSpec:
    x: float
    y: float
    dims: list
    yaw: float = 0.0
    intensity: float = 0.6


@dataclass
class SceneSpec:
    boxes: list = field(default_factory=list)
    random_objects: int = 0  # >0: draw this many boxes from the seed instead
    min_gap: float = 0.2
    region: list = field(default_factory=lambda: [0.30, 0.18])
    background: float = 0.0
    side_shading: float = -0.7


@dataclass
class ScanSpec:
    """Linear camera scan used for depth (and the start pose of the servo)."""

    height: float = 1.0
    start: list = field(default_factory=lambda: [0.0, 0.0])
    end: list = field(default_factory=lambda: [0.2, 0.04])
    yaw: float = 0.0
    duration_us: int = 500_000
    n_samples: int = 20
    dt_us: int = 5000


@dataclass
class NoiseSpec:
    rate_hz: float = 0.0
    filter_window_us: int = 5000
    filter_radius: int = 1


@dataclass
class HarrisSpec:
    window_us: int = 20_000
    patch: int = 7
    k: float = 0.04
    threshold: float = 0.5


@dataclass
class EmvsSpec:
    z_min: float = 0.3
    z_max: float = 1.5
    n_z: int = 64
    relative: float = 0.6
    local_radius: int = 8
    floor: float = 0.1
    nms_radius: int = 2


@dataclass
class CloudSpec:
    outlier_k: int = 1
    outlier_max_dist: float = 0.25
    cluster_radius: float = 0.16
    min_points: int = 3
    corner_merge: float = 0.02
    z_range: list = field(default_factory=lambda: [-0.05, 0.25])  # volume of interest above the table


@dataclass
class MemsSpec:
    bandwidth: float = 25.0
    alpha: float = 0.35
    beta: int = 1
    temporal_extent: float = 50.0
    convergence_eps: float = 0.01
    max_iters: int = 500
    min_cluster_fraction: float = 0.01
    max_events: int = 1000  # stride grows until at most this many events remain
    burst_distance: float = 0.01
    burst_duration_us: int = 10_000

    def config(self, n_events: int) -> MemsConfig:
        beta = max(self.beta, math.ceil(n_events / self.max_events)) if self.max_events else self.beta
        return MemsConfig(bandwidth=self.bandwidth, alpha=self.alpha, beta=max(1, beta),
                          temporal_extent=self.temporal_extent,
                          convergence_eps=self.convergence_eps, max_iters=self.max_iters,
                          min_cluster_fraction=self.min_cluster_fraction)


@dataclass
class ServoSpec:
    gains: ServoGains = field(default_factory=ServoGains)
    dt: float = 0.1
    max_steps: int = 60
    latency: int = 0
    dither_distance: float = 0.01
    dither_duration_us: int = 10_000
    dither_samples: int = 4
    mask_radius: float = 6.0
    corner_radius: float = 4.0
    decay_us: float = 50_000.0
    top_k: int = 4
    orientation_chunks: int = 5


@dataclass
class GraspSpec:
    gripper: GripperModel = field(default_factory=GripperModel)
    grasp_offset: float = 0.2
    limits: Limits = field(default_factory=Limits)
    workspace: list = field(default_factory=lambda: [-0.4, 0.4, -0.3, 0.3])


@dataclass
class Scenario:
    seed: int
    name: str = "scenario"
    pipeline: str = "model-free"
    camera: CameraSpec = field(default_factory=CameraSpec)
    scene: SceneSpec = field(default_factory=SceneSpec)
    scan: ScanSpec = field(default_factory=ScanSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    harris: HarrisSpec = field(default_factory=HarrisSpec)
    emvs: EmvsSpec = field(default_factory=EmvsSpec)
    cloud: CloudSpec = field(default_factory=CloudSpec)
    mems: MemsSpec = field(default_factory=MemsSpec)
    servo: ServoSpec = field(default_factory=ServoSpec)
    grasp: GraspSpec = field(default_factory=GraspSpec)
    output: str | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")

    # -- derived objects
    def build_scene(self) -> Scene:
        s = self.scene
        if s.random_objects > 0:
            boxes = random_boxes(s.random_objects, self.seed, s.min_gap, s.region)
        else:
            boxes = [Box.on_table(b.x, b.y, b.dims, b.yaw, b.intensity) for b in s.boxes]
        return Scene(boxes, s.background, s.side_shading)

    def scan_trajectory(self) -> Trajectory:
        sc = self.scan
        return Trajectory.linear(look_down_pose(sc.start[0], sc.start[1], sc.height, sc.yaw),
                                 look_down_pose(sc.end[0], sc.end[1], sc.height, sc.yaw),
                                 sc.duration_us, sc.n_samples)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def random_boxes(n: int, seed: int, min_gap: float = 0.2, region=(0.30, 0.18),
                 max_tries: int = 10_000) -> list[Box]:
    """``n`` boxes of the reference sizes at random yaw, footprints ``min_gap`` apart."""
    rng = np.random.default_rng(seed)
    sizes = [REFERENCE_SIZES[i % len(REFERENCE_SIZES)] for i in rng.permutation(max(n, len(REFERENCE_SIZES)))[:n]]
    for _ in range(max_tries):
        xy = rng.uniform(-1, 1, size=(n, 2)) * np.asarray(region, dtype=float)
        radii = np.array([math.hypot(d[0], d[1]) / 2 for d in sizes])
        ok = all(np.hypot(*(xy[i] - xy[j])) >= radii[i] + radii[j] + min_gap
                 for i in range(n) for j in range(i + 1, n))
        if ok:
            yaws = rng.uniform(-90, 90, size=n)
            return [Box.on_table(float(x), float(y), d, float(w)) for (x, y), d, w in zip(xy, sizes, yaws)]
    raise ConfigError(f"could not place {n} boxes with gap {min_gap} m")


def _build(cls, data: Any, path: str):
    """Instantiate nested dataclasses from plain mappings, rejecting unknown keys."""
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'scenario'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path or 'scenario'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    hints = _resolved_types(cls)
    for name, value in data.items():
        sub = hints.get(name)
        key = f"{path}.{name}" if path else name
        if name == "boxes" and cls is SceneSpec:
            kwargs[name] = [_build(BoxSpec, b, f"{key}[{i}]") for i, b in enumerate(value or [])]
        elif dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, key)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'scenario'}: {exc}") from None


def _resolved_types(cls) -> dict:
    import typing
    import evgrasp.scenario as mod
    return typing.get_type_hints(cls, globalns={**vars(mod), **vars(typing)})


def apply_override(doc: dict, item: str) -> None:
    """Set ``a.b.c=value`` in a nested mapping; ``value`` is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not key=value")
    key, raw = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override '{item}' has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override '{item}': {exc}") from None
    node = doc
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"override '{item}': '{p}' is not a section")
        node = nxt
    node[parts[-1]] = value


def scenario_from_dict(doc: dict, overrides=(), seed: int | None = None) -> Scenario:
    doc = copy.deepcopy(doc) if doc else {}
    for item in overrides:
        apply_override(doc, item)
    if seed is not None:
        doc["seed"] = seed
    if "seed" not in doc:
        raise ConfigError("seed is mandatory")
    if "schema_version" not in doc:
        raise ConfigError("schema_version is mandatory")
    return _build(Scenario, doc, "")


def load_scenario(path, overrides=(), seed: int | None = None) -> Scenario:
    """Read a scenario file; raises OSError for IO failures, ConfigError otherwise."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return scenario_from_dict(doc or {}, overrides, seed)


def dump_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(yaml.safe_dump(sc.to_dict(), sort_keys=False), encoding="utf-8")
