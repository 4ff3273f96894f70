from __future__ import annotations

import math
from dataclasses import replace

import pytest
import yaml

from droneset.capture import DegradationParams
from droneset.config import (
    SimulationConfig,
    config_from_dict,
    config_to_dict,
    default_config,
    dump_config,
    load_config,
)
from droneset.flightctl import MissionConfig, PidGains
from droneset.vehicle import ShakeModel


def test_default_round_trip():
    cfg = default_config()
    text = dump_config(cfg)
    back = load_config(text)
    assert back == cfg
    assert dump_config(back) == text


def test_custom_round_trip():
    base = default_config(5, 1.2, 3)
    cam = replace(base.mission.object_camera, exposure_time=0.02)
    cfg = replace(
        base,
        mission=replace(base.mission, frames_per_stop=12, object_camera=cam),
        gains=replace(base.gains, yaw=PidGains(2.0, 0.1, 0.05, integral_limit=0.3, output_limit=1.0)),
        shake=ShakeModel(0.02, 0.01, 0.3),
        degradation=DegradationParams(500.0, 0.1, 1.0),
    )
    assert load_config(dump_config(cfg)) == cfg


def test_shake_disabled_round_trip():
    cfg = replace(default_config(), shake=None)
    d = config_to_dict(cfg)
    assert d["shake"] == {"enabled": False}
    assert config_from_dict(d).shake is None


def test_cameras_stored_in_degrees():
    d = config_to_dict(default_config())
    assert d["mission"]["ground_camera"]["fov_degrees"] == pytest.approx(64.0)
    assert d["mission"]["object_camera"]["fov_degrees"] == pytest.approx(60.0)


def test_missing_sections_use_defaults():
    d = config_to_dict(default_config())
    minimal = {k: d[k] for k in d if k not in ("mission", "gains", "vehicle", "shake", "degradation",
                                                 "color_ranges", "detector")}
    cfg = config_from_dict(minimal)
    assert cfg.mission == MissionConfig() and cfg.shake == ShakeModel()
    assert cfg == SimulationConfig(layout=cfg.layout)


def test_unknown_fields_rejected():
    d = config_to_dict(default_config())
    d["vehicle"]["warp_drive"] = 1
    with pytest.raises(ValueError):
        config_from_dict(d)
    d = config_to_dict(default_config())
    d["gains"]["roll"] = {"kp": 1.0}
    with pytest.raises(ValueError):
        config_from_dict(d)


def test_yaml_is_plain():
    d = yaml.safe_load(dump_config(default_config()))
    assert len(d["stops"]) == 8
    assert math.isclose(d["mission"]["object_camera"]["exposure_time"], 1 / 25)
