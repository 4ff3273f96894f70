"""YAML configuration for a full simulation: arena, mission, gains and noise models.

A config file is the arena layout plus optional sections::

    mission:      MissionConfig fields (cameras as {fov_degrees, exposure_time})
    gains:        {altitude|image_x|image_y|yaw|path: {kp, ki, kd, integral_limit, output_limit}}
    vehicle:      VehicleParams fields
    shake:        {sigma_pos, sigma_yaw, tau, enabled}
    degradation:  {blur_scale, exposure_jitter_std, sensor_noise_std}
    color_ranges: {orange|blue|pink: {low: [h, s, v], high: [h, s, v]}}
    detector:     {min_area, min_elongation}

Missing sections fall back to the defaults.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Optional

import yaml

from .arena import ArenaLayout, CameraModel, generate_layout, layout_from_dict, layout_to_dict
from .capture import DegradationParams
from .flightctl import LOOPS, FlightGains, MissionConfig, PidGains
from .perception import DEFAULT_RANGES, ColorRange, DetectorParams, ranges_from_dict, ranges_to_dict
from .vehicle import ShakeModel, VehicleParams


@dataclass(frozen=True)
class SimulationConfig:
    layout: ArenaLayout
    mission: MissionConfig = MissionConfig()
    gains: FlightGains = FlightGains()
    vehicle: VehicleParams = VehicleParams()
    shake: Optional[ShakeModel] = ShakeModel()
    degradation: DegradationParams = DegradationParams()
    ranges: Mapping[str, ColorRange] = field(default_factory=lambda: dict(DEFAULT_RANGES))
    detector: DetectorParams = DetectorParams()


def _camera_to_dict(cam: CameraModel) -> dict:
    return {"fov_degrees": math.degrees(cam.horizontal_fov), "exposure_time": cam.exposure_time}


def _camera_from_dict(base: CameraModel, d: Optional[Mapping]) -> CameraModel:
    if not d:
        return base
    return replace(
        base,
        horizontal_fov=math.radians(float(d.get("fov_degrees", math.degrees(base.horizontal_fov)))),
        exposure_time=float(d.get("exposure_time", base.exposure_time)),
    )


def _plain(dc, skip=()) -> dict:
    return {f.name: getattr(dc, f.name) for f in fields(dc) if f.name not in skip}


def _update(dc, d: Optional[Mapping], skip=()):
    if not d:
        return dc
    names = {f.name for f in fields(dc)} - set(skip)
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {type(dc).__name__} fields: {sorted(unknown)}")
    casts = {f.name: type(getattr(dc, f.name)) for f in fields(dc) if f.name in names}
    return replace(dc, **{k: casts[k](v) for k, v in d.items()})


def config_to_dict(cfg: SimulationConfig) -> dict:
    d = layout_to_dict(cfg.layout)
    mission = _plain(cfg.mission, skip=("ground_camera", "object_camera"))
    mission["ground_camera"] = _camera_to_dict(cfg.mission.ground_camera)
    mission["object_camera"] = _camera_to_dict(cfg.mission.object_camera)
    d["mission"] = mission
    d["gains"] = {name: asdict(getattr(cfg.gains, name)) for name in LOOPS}
    d["vehicle"] = _plain(cfg.vehicle)
    if cfg.shake is None:
        d["shake"] = {"enabled": False}
    else:
        d["shake"] = {"enabled": True, **_plain(cfg.shake, skip=("seed",))}
    d["degradation"] = _plain(cfg.degradation, skip=("seed",))
    d["color_ranges"] = ranges_to_dict(cfg.ranges)
    d["detector"] = _plain(cfg.detector)
    return d


def config_from_dict(d: Mapping) -> SimulationConfig:
    layout = layout_from_dict(dict(d))
    m = dict(d.get("mission") or {})
    gcam, ocam = m.pop("ground_camera", None), m.pop("object_camera", None)
    mission = _update(MissionConfig(), m, skip=("ground_camera", "object_camera"))
    mission = replace(
        mission,
        ground_camera=_camera_from_dict(mission.ground_camera, gcam),
        object_camera=_camera_from_dict(mission.object_camera, ocam),
    )
    gains = FlightGains()
    for name, g in (d.get("gains") or {}).items():
        if name not in LOOPS:
            raise ValueError(f"unknown control loop {name!r}")
        gains = replace(gains, **{name: PidGains(**{k: float(v) for k, v in g.items()})})
    s = dict(d.get("shake") or {})
    enabled = bool(s.pop("enabled", True))
    shake = _update(ShakeModel(), s, skip=("seed",)) if enabled else None
    return SimulationConfig(
        layout=layout,
        mission=mission,
        gains=gains,
        vehicle=_update(VehicleParams(), d.get("vehicle")),
        shake=shake,
        degradation=_update(DegradationParams(), d.get("degradation"), skip=("seed",)),
        ranges=ranges_from_dict(d.get("color_ranges")),
        detector=_update(DetectorParams(), d.get("detector")),
    )


def dump_config(cfg: SimulationConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def load_config(text: str) -> SimulationConfig:
    return config_from_dict(yaml.safe_load(text))


def read_config(path: str | Path) -> SimulationConfig:
    return load_config(Path(path).read_text())


def default_config(n_stops: int = 8, radius: float = 1.5, seed: int = 7) -> SimulationConfig:
    return SimulationConfig(layout=generate_layout(n_stops, radius, seed))
