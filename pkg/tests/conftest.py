from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from droneset import datastore
from droneset.arena import ObjectSpec, generate_layout
from droneset.flightctl import run_mission

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def layout8():
    return generate_layout(8, 1.5, 7)


@pytest.fixture(scope="session")
def mug():
    return ObjectSpec("mug", "mug_00", "white mug", "yes", 360, 11, (0.2, 0.2))


@pytest.fixture(scope="session")
def mission(layout8, mug):
    """One default mission, shared by the capture and datastore tests."""
    return run_mission(layout8, mug, seed=1)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, layout8):
    """Two classes x two objects flown with default settings."""
    root = tmp_path_factory.mktemp("small_ds")
    objects = datastore.default_catalog(2, 2, seed=5)
    groups = {}
    for i, obj in enumerate(objects):
        log = run_mission(layout8, obj, seed=100 + i)
        datastore.write_object(log, obj, root)
        groups.setdefault(obj.class_name, []).append(obj.instance_id)
    datastore.write_manifest(root, datastore.DatasetManifest.build(groups, 8, 30, root))
    return root, objects


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            for name, value in getattr(rep, "user_properties", []):
                if name == "acceptance" and rep.when == "call":
                    lines.append(value)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
