from __future__ import annotations

import csv
import json
import shutil
import subprocess
import sys

import pytest

from droneset import datastore
from droneset.cli import main, mission_seed
from droneset.datastore import tree_digest


def run(*argv) -> int:
    return main([str(a) for a in argv])


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "droneset", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("layout", "fly", "validate", "split", "merge-plan", "attack", "report", "oracle-stub"):
        assert cmd in out.stdout


def test_mission_seed_independent_of_order():
    assert mission_seed(0, "mug", "mug_00") == mission_seed(0, "mug", "mug_00")
    assert mission_seed(0, "mug", "mug_00") != mission_seed(0, "mug", "mug_01")
    assert mission_seed(0, "mug", "mug_00") != mission_seed(1, "mug", "mug_00")


def test_layout_deterministic(tmp_path):
    a, b = tmp_path / "a.yaml", tmp_path / "b.yaml"
    assert run("layout", "--seed", 3, "-o", a) == 0
    assert run("layout", "--seed", 3, "-o", b) == 0
    assert a.read_bytes() == b.read_bytes()
    assert run("layout", "--seed", 4, "-o", b) == 0
    assert a.read_bytes() != b.read_bytes()


def test_layout_bad_args_exit_nonzero(tmp_path):
    assert run("layout", "--stops", 0, "-o", tmp_path / "x.yaml") == 2


@pytest.fixture(scope="module")
def flown(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    a, b = root / "a", root / "b"
    for out in (a, b):
        assert run("fly", "--classes", 1, "--objects-per-class", 1, "--seed", 2, "--out", out,
                   "--log-dir", root / f"logs_{out.name}") == 0
    return root, a, b


def test_fly_deterministic(flown):
    root, a, b = flown
    assert tree_digest(a) == tree_digest(b)
    assert (root / "logs_a").exists()
    logs_a = sorted((root / "logs_a").rglob("*.jsonl"))
    logs_b = sorted((root / "logs_b").rglob("*.jsonl"))
    assert [p.read_bytes() for p in logs_a] == [p.read_bytes() for p in logs_b]
    m = json.loads((a / datastore.MANIFEST_NAME).read_text())
    assert m["total_images"] == 240


def test_fly_resume_skips_done(flown, capsys):
    _, a, _ = flown
    before = tree_digest(a)
    assert run("fly", "--classes", 1, "--objects-per-class", 1, "--seed", 2, "--out", a, "--resume") == 0
    assert tree_digest(a) == before
    assert "240 images" in capsys.readouterr().out


def test_validate_exit_codes(flown, tmp_path, capsys):
    _, a, _ = flown
    assert run("validate", a) == 0
    assert "0 violations" in capsys.readouterr().out
    bad = tmp_path / "bad"
    shutil.copytree(a, bad)
    next(bad.rglob("*.png")).unlink()
    assert run("validate", bad) == 1
    assert "1 violation" in capsys.readouterr().out


def test_split_deterministic_and_infeasible(small_dataset, tmp_path):
    root, _ = small_dataset
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert run("split", root, "-C", 2, "-O", 1, "-P", 2, "-E", 3, "--strategy", "max-pose-diversity",
                   "--seed", 1, "-o", out) == 0
    assert a.read_bytes() == b.read_bytes()
    d = json.loads(a.read_text())
    assert d["train_size"] == 12 == len(d["train"]) and d["config"]["D"] == 12
    assert run("split", root, "-C", 2, "-O", 2, "-P", 1, "-E", 1, "-o", tmp_path / "c.json") == 1
    with pytest.raises(SystemExit):
        run("split", root, "-C", 2)


def test_merge_plan_deterministic(tmp_path):
    m = tmp_path / "merge.yaml"
    m.write_text("classes:\n  airplane: [airliner, warplane]\n  dog: [beagle]\n")
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run("merge-plan", m, "--seed", 2, "-o", a) == 0
    assert run("merge-plan", m, "--seed", 2, "-o", b) == 0
    assert a.read_bytes() == b.read_bytes()
    d = json.loads(a.read_text())
    assert d["classes"]["airplane"]["train_size"] == 1300 and d["classes"]["airplane"]["test_size"] == 50
    m.write_text("classes:\n  a: [x, y]\n  b: [y]\n")
    assert run("merge-plan", m, "-o", a) == 1


def _attack(root, out, *extra):
    return run("attack", root, "--stub", "pose-biased", "--base", 0.9, "--decay", 0.15,
               "--pairs-per-class", 10, "--seed", 3, "-o", out, *extra)


def test_attack_deterministic(small_dataset, tmp_path):
    root, _ = small_dataset
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert _attack(root, a, "--table-out", tmp_path / "t.csv", "--report-out", tmp_path / "r.json") == 0
    assert _attack(root, b) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = list(csv.DictReader(a.open()))
    assert [int(r["delta_theta"]) for r in rows if r["class"] == "*"] == [0, 45, 90, 135, 180]
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["complete"] and rep["pairs"] > 0
    # a stored accuracy table reproduces the measured frontal poses
    c = tmp_path / "c.csv"
    assert _attack(root, c, "--frontal", tmp_path / "t.csv") == 0
    assert c.read_bytes() == a.read_bytes()


def test_attack_through_subprocess_matches_stub(small_dataset, tmp_path):
    root, _ = small_dataset
    local, remote = tmp_path / "l.csv", tmp_path / "r.csv"
    cmd = f"{sys.executable} -m droneset oracle-stub --stub pose-biased --base 0.9 --decay 0.15"
    assert _attack(root, local) == 0
    assert _attack(root, remote, "--oracle", cmd) == 0
    assert local.read_bytes() == remote.read_bytes()


def test_attack_oracle_crash_exits_nonzero(small_dataset, tmp_path):
    root, _ = small_dataset
    out = tmp_path / "partial.csv"
    # answers 300 requests, then exits mid-run
    script = tmp_path / "dies.py"
    script.write_text(
        "import sys\n"
        "from droneset.oracle import StubOracle, parse_request\n"
        "o = StubOracle()\n"
        "for i, line in enumerate(sys.stdin):\n"
        "    if i == 300:\n"
        "        sys.exit(4)\n"
        "    print(o.classify(parse_request(line)).to_line(), flush=True)\n"
    )
    code = _attack(root, out, "--oracle", f"{sys.executable} {script}", "--frontal-frames", 8)
    assert code == 1
    assert out.read_text().startswith("delta_theta,class,n,correct,accuracy")


def test_report_deterministic(small_dataset, tmp_path):
    root, _ = small_dataset
    c1, c2 = tmp_path / "biased.csv", tmp_path / "perfect.csv"
    assert _attack(root, c1) == 0
    assert run("attack", root, "--pairs-per-class", 10, "-o", c2) == 0
    outs = []
    for k in range(2):
        o, s = tmp_path / f"rep{k}.csv", tmp_path / f"sc{k}.csv"
        assert run("report", c1, c2, "--scatter", "biased", "perfect", "--delta", 90, "--scatter-out", s,
                   "-o", o) == 0
        outs.append((o.read_bytes(), s.read_bytes()))
    assert outs[0] == outs[1]
    rows = list(csv.DictReader(open(tmp_path / "rep0.csv")))
    assert {r["run"] for r in rows} == {"biased", "perfect", "pooled"}
    assert all(float(r["ci_low"]) <= float(r["ci_high"]) for r in rows)
    scatter = list(csv.DictReader(open(tmp_path / "sc0.csv")))
    assert scatter and all(float(r["perfect"]) == 1.0 for r in scatter)
    assert run("report", c1, c2, "--scatter", "biased", "nope", "-o", tmp_path / "x.csv") == 1


def test_missing_inputs_exit_nonzero(tmp_path):
    assert run("validate", tmp_path / "nowhere") == 1
    assert run("split", tmp_path / "nowhere", "--preset", "object-vs-pose/max-object-diversity") == 1
    assert run("merge-plan", tmp_path / "nope.yaml") == 2
