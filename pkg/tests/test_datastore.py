from __future__ import annotations

import csv
import json
import shutil

import numpy as np
import pytest
from hypothesis import given, strategies as st

from droneset import datastore
from droneset.arena import ObjectSpec
from droneset.datastore import (
    ANNOTATIONS_NAME,
    CSV_COLUMNS,
    DatasetManifest,
    DatasetNotValid,
    catalog_from_yaml,
    catalog_to_yaml,
    default_catalog,
    frontal_flag,
    image_name,
    parse_image_name,
    read_dataset,
    read_png,
    tree_digest,
    validate,
    write_manifest,
    write_object,
)


@pytest.fixture(scope="module")
def one_object(tmp_path_factory, mission, mug):
    root = tmp_path_factory.mktemp("one")
    n = write_object(mission, mug, root)
    write_manifest(root, DatasetManifest.build({"mug": ["mug_00"]}, 8, 30, root))
    return root, n


@pytest.fixture
def scratch(one_object, tmp_path):
    dst = tmp_path / "ds"
    shutil.copytree(one_object[0], dst)
    return dst


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _rewrite(path, rows):
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def test_write_object_file_count(one_object):
    root, n = one_object
    files = sorted(p.name for p in (root / "mug" / "mug_00").iterdir())
    assert n == 241 and len(files) == 241
    assert ANNOTATIONS_NAME in files
    pngs = [f for f in files if f.endswith(".png")]
    assert sorted(pngs) == sorted(image_name(v, i) for v in range(0, 360, 45) for i in range(30))
    assert not [p for p in (root / "mug").iterdir() if p.name.startswith(".")]


def test_csv_header_and_rows(one_object):
    root, _ = one_object
    rows = _rows(root / "mug" / "mug_00" / ANNOTATIONS_NAME)
    assert tuple(rows[0]) == CSV_COLUMNS
    assert rows[0] == ["image_file", "description", "pose_degrees", "frontal", "symmetry_degrees",
                       "x1", "y1", "x2", "y2"]
    body = [dict(zip(rows[0], r)) for r in rows[1:]]
    assert len(body) == 240
    for r in body:
        assert int(r["frontal"]) == (1 if r["pose_degrees"] == "0" else 0)
        assert r["symmetry_degrees"] == "360" and r["description"] == "white mug"


def test_not_identifiable_front_gives_minus_one(mission, tmp_path):
    obj = ObjectSpec("bowl", "bowl_00", "round bowl", "not-identifiable", 45, 3, (0.2, 0.2))
    write_object(mission, obj, tmp_path)
    rows = _rows(tmp_path / "bowl" / "bowl_00" / ANNOTATIONS_NAME)[1:]
    assert {r[3] for r in rows} == {"-1"}
    assert {r[4] for r in rows} == {"45"}


def test_frontal_flag_cases():
    yes = ObjectSpec("a", "a0", has_front_face="yes")
    no = ObjectSpec("a", "a1", has_front_face="no")
    assert [frontal_flag(yes, p) for p in (0, 45, 180)] == [1, 0, 0]
    assert frontal_flag(no, 0) == -1


@given(st.sampled_from(range(0, 360, 45)), st.integers(0, 10_000))
def test_image_name_round_trip(view, idx):
    assert parse_image_name(image_name(view, idx)) == (view, idx)
    assert parse_image_name(f"x/{image_name(view, idx)}") == (view, idx)


def test_parse_image_name_rejects_junk():
    assert parse_image_name("view0_frame.png") is None
    assert parse_image_name("annotations.csv") is None


def test_valid_dataset_has_no_violations(one_object):
    rep = validate(one_object[0])
    assert rep.ok, rep.summary()
    assert rep.images_checked == 240


def test_off_grid_pose_is_one_violation(scratch):
    path = scratch / "mug" / "mug_00" / ANNOTATIONS_NAME
    rows = _rows(path)
    rows[5][2] = "50"
    _rewrite(path, rows)
    rep = validate(scratch)
    assert len(rep.violations) == 1
    v = rep.violations[0]
    assert v.field == "pose_degrees" and ":6" in str(v.file)


def test_deleted_png_is_one_violation(scratch):
    victim = scratch / "mug" / "mug_00" / image_name(90, 4)
    victim.unlink()
    rep = validate(scratch)
    assert len(rep.violations) == 1
    assert rep.violations[0].field == "image_file" and "view90_frame4.png" in str(rep.violations[0].file)


def test_wrong_raster_size_detected(scratch):
    import cv2

    victim = scratch / "mug" / "mug_00" / image_name(0, 0)
    cv2.imwrite(str(victim), np.zeros((100, 100, 3), np.uint8))
    rep = validate(scratch)
    assert [v.field for v in rep.violations] == ["raster"]


def test_bad_bbox_and_frontal_detected(scratch):
    path = scratch / "mug" / "mug_00" / ANNOTATIONS_NAME
    rows = _rows(path)
    rows[1][5], rows[1][7] = "300", "300"  # x1 == x2
    rows[2][3] = "2"
    _rewrite(path, rows)
    assert sorted(v.field for v in validate(scratch).violations) == ["bbox", "frontal"]


def test_two_frontal_poses_detected(scratch):
    path = scratch / "mug" / "mug_00" / ANNOTATIONS_NAME
    rows = _rows(path)
    i = next(k for k, r in enumerate(rows) if k and r[2] == "90")
    rows[i][3] = "1"
    _rewrite(path, rows)
    assert [v.field for v in validate(scratch).violations] == ["frontal"]


def test_manifest_arithmetic_checked(scratch):
    p = scratch / datastore.MANIFEST_NAME
    d = json.loads(p.read_text())
    d["total_images"] = 241
    p.write_text(json.dumps(d))
    assert [v.field for v in validate(scratch).violations] == ["total_images"]
    d["total_images"] = 240
    d["frames_per_view"] = 29
    d["total_images"] = 8 * 29
    p.write_text(json.dumps(d))
    assert [v.field for v in validate(scratch).violations] == ["rows"]


def test_missing_manifest_and_bad_header(scratch):
    (scratch / datastore.MANIFEST_NAME).unlink()
    path = scratch / "mug" / "mug_00" / ANNOTATIONS_NAME
    rows = _rows(path)
    rows[0][0] = "file"
    _rewrite(path, rows)
    assert sorted(v.field for v in validate(scratch).violations) == ["header", "manifest"]


def test_round_trip_field_for_field(one_object, mission, mug):
    ds = read_dataset(one_object[0])
    recs = list(ds)
    assert len(recs) == 240
    by_name = {r.annotation.image_file: r for r in recs}
    for cap in mission.captures:
        ann = datastore.annotation_for(cap, mug)
        rec = by_name[ann.image_file]
        assert rec.annotation == ann and rec.frame_index == cap.frame_index
        assert rec.view_degrees == cap.nominal_view_degrees and rec.object_key == ("mug", "mug_00")
    for cap in mission.captures[::37]:
        name = image_name(cap.nominal_view_degrees, cap.frame_index)
        assert np.array_equal(read_png(one_object[0] / "mug" / "mug_00" / name), cap.frame.pixels)


def test_read_dataset_refuses_invalid(scratch):
    (scratch / "mug" / "mug_00" / image_name(0, 0)).unlink()
    with pytest.raises(DatasetNotValid) as err:
        read_dataset(scratch)
    assert len(err.value.report.violations) == 1
    assert len(list(read_dataset(scratch, force=True))) == 240


def test_groups_lexicographic(small_dataset):
    root, objects = small_dataset
    ds = read_dataset(root)
    keys = [k for k, _ in ds.groups()]
    assert keys == sorted(keys)
    assert len(keys) == len(objects) * 8
    for _, grp in ds.groups():
        assert [r.frame_index for r in grp] == list(range(30))
    assert ds.manifest.total_images == 4 * 240


def test_partial_write_is_cleaned_up(mission, mug, tmp_path, monkeypatch):
    calls = {"n": 0}
    real = datastore.encode_png

    def flaky(px):
        calls["n"] += 1
        if calls["n"] == 50:
            raise OSError("disk full")
        return real(px)

    monkeypatch.setattr(datastore, "encode_png", flaky)
    with pytest.raises(OSError):
        write_object(mission, mug, tmp_path)
    assert list((tmp_path / "mug").iterdir()) == []


def test_write_refuses_existing_and_aborted(one_object, mission, mug):
    with pytest.raises(FileExistsError):
        write_object(mission, mug, one_object[0])

    class Aborted:
        aborted = True
        captures = []

    with pytest.raises(ValueError):
        write_object(Aborted(), mug, one_object[0], overwrite=True)


def test_tree_digest_tracks_content(scratch, one_object):
    assert tree_digest(scratch) == tree_digest(one_object[0])
    (scratch / "mug" / "mug_00" / image_name(0, 1)).write_bytes(b"x")
    assert tree_digest(scratch) != tree_digest(one_object[0])


def test_manifest_builder():
    m = DatasetManifest.build({"b": ["b1", "b0"], "a": ["a0", "a1"]}, 8, 30)
    assert m.classes == ("a", "b") and m.total_images == 2 * 2 * 8 * 30
    assert m.objects["b"] == ["b0", "b1"]
    with pytest.raises(ValueError):
        DatasetManifest.build({"a": ["a0"], "b": ["b0", "b1"]}, 8, 30)


def test_default_catalog_shape_and_determinism():
    cat = default_catalog()
    assert len(cat) == 500
    assert len({o.class_name for o in cat}) == 25
    assert len({(o.class_name, o.instance_id) for o in cat}) == 500
    assert catalog_to_yaml(cat) == catalog_to_yaml(default_catalog())
    for o in cat:
        if o.symmetry_degrees < 360:
            assert o.has_front_face.value == "not-identifiable"
    assert catalog_from_yaml(catalog_to_yaml(cat)) == cat


def test_catalog_rejects_duplicates():
    text = catalog_to_yaml(default_catalog(1, 2)).replace("_01", "_00")
    with pytest.raises(ValueError):
        catalog_from_yaml(text)
