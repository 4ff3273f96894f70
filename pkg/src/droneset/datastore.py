"""Dataset layout on disk: PNG frames, per-object annotation CSVs and a manifest.

Layout::

    root/manifest.json
    root/<class>/<instance>/annotations.csv
    root/<class>/<instance>/view<deg>_frame<idx>.png

Every CSV field is an integer or text, so a fixed seed gives byte-identical
files.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import re
import shutil
import struct
import tempfile
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from itertools import groupby
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import cv2
import numpy as np
import yaml

from .arena import IMAGE_HEIGHT, IMAGE_WIDTH, FrontFace, ObjectSpec
from .capture import CaptureRecord

CSV_COLUMNS = (
    "image_file",
    "description",
    "pose_degrees",
    "frontal",
    "symmetry_degrees",
    "x1",
    "y1",
    "x2",
    "y2",
)
POSE_GRID = tuple(range(0, 360, 45))
MANIFEST_NAME = "manifest.json"
ANNOTATIONS_NAME = "annotations.csv"
PNG_PARAMS = [cv2.IMWRITE_PNG_COMPRESSION, 1, cv2.IMWRITE_PNG_STRATEGY, cv2.IMWRITE_PNG_STRATEGY_RLE]

_IMAGE_NAME = re.compile(r"^view(\d+)_frame(\d+)\.png$")
_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def image_name(view_degrees: int, frame_index: int) -> str:
    return f"view{view_degrees}_frame{frame_index}.png"


def parse_image_name(name: str) -> Optional[tuple[int, int]]:
    m = _IMAGE_NAME.match(os.path.basename(name))
    return (int(m.group(1)), int(m.group(2))) if m else None


def frontal_flag(obj: ObjectSpec, pose_degrees: int) -> int:
    """1 for the front view, 0 for other views, -1 if there is no usable front."""
    if obj.has_front_face != FrontFace.YES:
        return -1
    return 1 if pose_degrees == 0 else 0


@dataclass(frozen=True)
class AnnotationRecord:
    image_file: str
    description: str
    pose_degrees: int
    frontal: int
    symmetry_degrees: int
    x1: int
    y1: int
    x2: int
    y2: int

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)

    def row(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]


def annotation_for(capture: CaptureRecord, obj: ObjectSpec) -> AnnotationRecord:
    view = capture.nominal_view_degrees
    return AnnotationRecord(
        image_file=image_name(view, capture.frame_index),
        description=obj.description,
        pose_degrees=view,
        frontal=frontal_flag(obj, view),
        symmetry_degrees=obj.symmetry_degrees,
        x1=capture.bbox[0],
        y1=capture.bbox[1],
        x2=capture.bbox[2],
        y2=capture.bbox[3],
    )


def annotations_csv(records: Iterable[AnnotationRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def encode_png(pixels: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".png", cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR), PNG_PARAMS)
    if not ok:
        raise OSError("PNG encoding failed")
    return buf.tobytes()


def read_png(path: str | Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise OSError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def object_dir(root: str | Path, obj: ObjectSpec) -> Path:
    return Path(root) / obj.class_name / obj.instance_id


def write_object(log, obj: ObjectSpec, root: str | Path, *, overwrite: bool = False) -> int:
    """Write one mission's captures as PNGs plus ``annotations.csv``.

    Files go to a scratch directory next to the destination which is renamed
    into place at the end, so a failure never leaves a half-written object.
    Returns the number of files written.
    """
    if getattr(log, "aborted", False):
        raise ValueError("refusing to write an aborted mission")
    dest = object_dir(root, obj)
    if dest.exists() and not overwrite:
        raise FileExistsError(f"{dest} already exists")
    dest.parent.mkdir(parents=True, exist_ok=True)
    records = [annotation_for(c, obj) for c in log.captures]
    names = Counter(r.image_file for r in records)
    dup = [n for n, k in names.items() if k > 1]
    if dup:
        raise ValueError(f"duplicate image names in mission: {dup[:3]}")
    tmp = Path(tempfile.mkdtemp(prefix=f".{obj.instance_id}.", dir=dest.parent))
    try:
        for rec, cap in zip(records, log.captures):
            (tmp / rec.image_file).write_bytes(encode_png(cap.frame.pixels))
        (tmp / ANNOTATIONS_NAME).write_text(annotations_csv(records))
        if dest.exists():
            shutil.rmtree(dest)
        os.replace(tmp, dest)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return len(records) + 1


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class DatasetManifest:
    classes: tuple[str, ...]
    objects_per_class: int
    views_per_object: int
    frames_per_view: int
    total_images: int
    root: str = "."
    objects: dict = field(default_factory=dict, compare=False)

    @classmethod
    def build(cls, objects: dict[str, Sequence[str]], views_per_object: int,
              frames_per_view: int, root: str | Path = ".") -> "DatasetManifest":
        counts = {len(v) for v in objects.values()}
        if len(counts) > 1:
            raise ValueError("every class needs the same number of objects")
        per_class = counts.pop() if counts else 0
        classes = tuple(sorted(objects))
        return cls(
            classes=classes,
            objects_per_class=per_class,
            views_per_object=views_per_object,
            frames_per_view=frames_per_view,
            total_images=len(classes) * per_class * views_per_object * frames_per_view,
            root=str(root),
            objects={c: sorted(objects[c]) for c in classes},
        )

    @property
    def expected_images(self) -> int:
        return len(self.classes) * self.objects_per_class * self.views_per_object * self.frames_per_view

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        d.pop("root")  # the manifest lives at the root; a stored path would be stale after a move
        return d


def write_manifest(root: str | Path, manifest: DatasetManifest) -> Path:
    path = Path(root) / MANIFEST_NAME
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(root: str | Path) -> DatasetManifest:
    d = json.loads((Path(root) / MANIFEST_NAME).read_text())
    return DatasetManifest(
        classes=tuple(d["classes"]),
        objects_per_class=int(d["objects_per_class"]),
        views_per_object=int(d["views_per_object"]),
        frames_per_view=int(d["frames_per_view"]),
        total_images=int(d["total_images"]),
        root=str(root),
        objects={k: list(v) for k, v in d.get("objects", {}).items()},
    )


def scan_objects(root: str | Path) -> dict[str, list[str]]:
    """Class -> instance ids for every object directory holding annotations."""
    out: dict[str, list[str]] = defaultdict(list)
    for csv_path in sorted(Path(root).glob(f"*/*/{ANNOTATIONS_NAME}")):
        out[csv_path.parent.parent.name].append(csv_path.parent.name)
    return dict(out)


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    file: str
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.file}: {self.field}: {self.message}"


@dataclass
class ValidationReport:
    root: str
    violations: list[Violation] = field(default_factory=list)
    images_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, file, fld: str, message: str) -> None:
        self.violations.append(Violation(str(file), fld, message))

    def summary(self) -> str:
        head = f"{self.images_checked} images checked, {len(self.violations)} violations"
        return "\n".join([head] + [str(v) for v in self.violations])


def png_size(path: Path) -> Optional[tuple[int, int, int, int]]:
    """(width, height, bit_depth, color_type) from the IHDR chunk, or None."""
    with open(path, "rb") as fh:
        head = fh.read(29)
    if len(head) < 29 or head[:8] != _PNG_MAGIC or head[12:16] != b"IHDR":
        return None
    w, h, depth, ctype = struct.unpack(">IIBB", head[16:26])
    return w, h, depth, ctype


def _int(row: dict, key: str, report: ValidationReport, where: str) -> Optional[int]:
    try:
        return int(row[key])
    except (TypeError, ValueError, KeyError):
        report.add(where, key, f"not an integer: {row.get(key)!r}")
        return None


def _check_rows(obj_dir: Path, rel: str, report: ValidationReport) -> int:
    csv_path = obj_dir / ANNOTATIONS_NAME
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            report.add(f"{rel}/{ANNOTATIONS_NAME}", "header", f"expected {','.join(CSV_COLUMNS)}")
            return 0
        rows = [dict(zip(CSV_COLUMNS, r)) if len(r) == len(CSV_COLUMNS) else r for r in reader]
    frontal_poses: set[int] = set()
    flags: set[int] = set()
    count = 0
    for n, row in enumerate(rows, start=2):
        where = f"{rel}/{ANNOTATIONS_NAME}:{n}"
        if not isinstance(row, dict):
            report.add(where, "row", f"expected {len(CSV_COLUMNS)} columns, got {len(row)}")
            continue
        count += 1
        pose = _int(row, "pose_degrees", report, where)
        if pose is not None and pose not in POSE_GRID:
            report.add(where, "pose_degrees", f"{pose} is not on the 45 degree grid")
        frontal = _int(row, "frontal", report, where)
        if frontal is not None:
            if frontal not in (1, 0, -1):
                report.add(where, "frontal", f"{frontal} not in {{1, 0, -1}}")
            else:
                flags.add(frontal)
                if frontal == 1 and pose is not None:
                    frontal_poses.add(pose)
        sym = _int(row, "symmetry_degrees", report, where)
        if sym is not None and (sym <= 0 or 360 % sym):
            report.add(where, "symmetry_degrees", f"{sym} does not divide 360")
        box = [_int(row, k, report, where) for k in ("x1", "y1", "x2", "y2")]
        if None not in box:
            x1, y1, x2, y2 = box
            if not (0 <= x1 < x2 <= IMAGE_WIDTH and 0 <= y1 < y2 <= IMAGE_HEIGHT):
                report.add(where, "bbox", f"({x1}, {y1}, {x2}, {y2}) outside the half-open image box")
        img = obj_dir / row["image_file"]
        if os.sep in row["image_file"] or "/" in row["image_file"] or not img.is_file():
            report.add(f"{rel}/{row['image_file']}", "image_file", "missing file")
            continue
        report.images_checked += 1
        info = png_size(img)
        if info is None:
            report.add(f"{rel}/{row['image_file']}", "image_file", "not a PNG")
        elif info[:2] != (IMAGE_WIDTH, IMAGE_HEIGHT) or info[2:] != (8, 2):
            report.add(f"{rel}/{row['image_file']}", "raster",
                       f"expected 8-bit RGB {IMAGE_WIDTH}x{IMAGE_HEIGHT}, got {info}")
    if -1 in flags and len(flags) > 1:
        report.add(f"{rel}/{ANNOTATIONS_NAME}", "frontal", "-1 mixed with 0/1 within one object")
    if len(frontal_poses) > 1:
        report.add(f"{rel}/{ANNOTATIONS_NAME}", "frontal",
                   f"frontal flag 1 on several poses {sorted(frontal_poses)}")
    return count


def validate(root: str | Path) -> ValidationReport:
    """Check annotations, files, raster sizes and manifest arithmetic."""
    root = Path(root)
    report = ValidationReport(str(root))
    if not root.is_dir():
        report.add(root, "root", "not a directory")
        return report
    manifest = None
    try:
        manifest = load_manifest(root)
    except FileNotFoundError:
        report.add(MANIFEST_NAME, "manifest", "missing")
    except (ValueError, KeyError, TypeError) as exc:
        report.add(MANIFEST_NAME, "manifest", f"unreadable: {exc}")

    found = scan_objects(root)
    rows_per_object: dict[tuple[str, str], int] = {}
    for cls in sorted(found):
        for inst in found[cls]:
            rel = f"{cls}/{inst}"
            rows_per_object[(cls, inst)] = _check_rows(root / cls / inst, rel, report)

    if manifest is not None:
        if manifest.total_images != manifest.expected_images:
            report.add(MANIFEST_NAME, "total_images",
                       f"{manifest.total_images} != {len(manifest.classes)} x {manifest.objects_per_class}"
                       f" x {manifest.views_per_object} x {manifest.frames_per_view}")
        if tuple(sorted(found)) != tuple(sorted(manifest.classes)):
            report.add(MANIFEST_NAME, "classes",
                       f"manifest lists {len(manifest.classes)} classes, {len(found)} on disk")
        for cls in sorted(set(found) & set(manifest.classes)):
            if len(found[cls]) != manifest.objects_per_class:
                report.add(cls, "objects_per_class",
                           f"{len(found[cls])} objects on disk, manifest says {manifest.objects_per_class}")
        per_object = manifest.views_per_object * manifest.frames_per_view
        for (cls, inst), n in sorted(rows_per_object.items()):
            if n != per_object:
                report.add(f"{cls}/{inst}/{ANNOTATIONS_NAME}", "rows",
                           f"{n} records, manifest implies {per_object}")
    return report


# --------------------------------------------------------------------------
# reading


@dataclass(frozen=True)
class DatasetRecord:
    """One annotation row together with its object identity."""

    class_name: str
    instance_id: str
    frame_index: int
    annotation: AnnotationRecord

    @property
    def view_degrees(self) -> int:
        return self.annotation.pose_degrees

    @property
    def object_key(self) -> tuple[str, str]:
        return (self.class_name, self.instance_id)

    @property
    def relpath(self) -> str:
        return f"{self.class_name}/{self.instance_id}/{self.annotation.image_file}"


class DatasetNotValid(ValueError):
    def __init__(self, report: ValidationReport):
        super().__init__(f"dataset failed validation with {len(report.violations)} violations")
        self.report = report


def _read_object(root: Path, cls: str, inst: str) -> list[DatasetRecord]:
    out = []
    with open(root / cls / inst / ANNOTATIONS_NAME, newline="") as fh:
        for row in csv.DictReader(fh):
            ann = AnnotationRecord(
                image_file=row["image_file"],
                description=row["description"],
                **{k: int(row[k]) for k in CSV_COLUMNS[2:]},
            )
            parsed = parse_image_name(ann.image_file)
            out.append(DatasetRecord(cls, inst, parsed[1] if parsed else -1, ann))
    out.sort(key=lambda r: (r.view_degrees, r.frame_index))
    return out


class Dataset:
    """Lazily streamed view of a dataset root."""

    def __init__(self, root: str | Path, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest

    def objects(self) -> list[tuple[str, str]]:
        return [(c, i) for c, insts in sorted(scan_objects(self.root).items()) for i in insts]

    def records(self) -> Iterator[DatasetRecord]:
        for cls, inst in self.objects():
            yield from _read_object(self.root, cls, inst)

    def groups(self) -> Iterator[tuple[tuple[str, str, int], list[DatasetRecord]]]:
        """Records grouped by (class, instance, view) in lexicographic order."""
        for rec_key, grp in groupby(self.records(), key=lambda r: (r.class_name, r.instance_id, r.view_degrees)):
            yield rec_key, list(grp)

    def __iter__(self) -> Iterator[DatasetRecord]:
        return self.records()

    def path(self, rec: DatasetRecord) -> Path:
        return self.root / rec.relpath


def read_dataset(root: str | Path, force: bool = False) -> Dataset:
    """Open a dataset for streaming; invalid roots need ``force=True``."""
    report = validate(root)
    if not report.ok and not force:
        raise DatasetNotValid(report)
    try:
        manifest = load_manifest(root)
    except (OSError, ValueError, KeyError):
        if not force:
            raise
        found = scan_objects(root)
        manifest = DatasetManifest(tuple(sorted(found)), 0, 0, 0, 0, str(root), found)
    return Dataset(root, manifest)


def tree_digest(root: str | Path) -> str:
    """SHA-256 over relative paths and contents of every file below ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode() + b"\0")
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


# --------------------------------------------------------------------------
# object catalogues

HOUSEHOLD_CLASSES = (
    "backpack", "ball", "basket", "bottle", "bowl", "box", "bucket", "can", "candle", "clock",
    "cup", "flowerpot", "hat", "helmet", "jar", "kettle", "lamp", "mug", "pillow", "plant",
    "shoe", "speaker", "teapot", "toy", "vase",
)


def default_catalog(n_classes: int = 25, objects_per_class: int = 20, seed: int = 0) -> list[ObjectSpec]:
    """Procedural objects with seeded symmetry, front-face flag and footprint."""
    if not 1 <= n_classes <= len(HOUSEHOLD_CLASSES):
        raise ValueError(f"n_classes must be in [1, {len(HOUSEHOLD_CLASSES)}]")
    if objects_per_class < 1:
        raise ValueError("objects_per_class must be >= 1")
    out = []
    for ci, cls in enumerate(HOUSEHOLD_CLASSES[:n_classes]):
        for oi in range(objects_per_class):
            rng = np.random.default_rng([seed, ci, oi, 0xCA7])
            sym = int(rng.choice([360, 360, 360, 180, 90, 45]))
            front = FrontFace.YES if sym == 360 and rng.random() < 0.8 else (
                FrontFace.NOT_IDENTIFIABLE if sym < 360 else FrontFace.NO)
            w, d = (float(round(v, 3)) for v in rng.uniform(0.12, 0.26, size=2))
            out.append(ObjectSpec(
                class_name=cls,
                instance_id=f"{cls}_{oi:02d}",
                description=f"{cls} {oi:02d}",
                has_front_face=front,
                symmetry_degrees=sym,
                appearance_seed=int(rng.integers(2**31)),
                footprint=(w, d),
            ))
    return out


def catalog_to_yaml(objects: Sequence[ObjectSpec]) -> str:
    rows = [
        {"class_name": o.class_name, "instance_id": o.instance_id, "description": o.description,
         "has_front_face": o.has_front_face.value, "symmetry_degrees": o.symmetry_degrees,
         "appearance_seed": o.appearance_seed, "footprint": list(o.footprint)}
        for o in objects
    ]
    return yaml.safe_dump({"objects": rows}, sort_keys=False)


def catalog_from_yaml(text: str) -> list[ObjectSpec]:
    d = yaml.safe_load(text) or {}
    out = []
    for r in d.get("objects", []):
        r = dict(r)
        if "footprint" in r:
            r["footprint"] = tuple(float(v) for v in r["footprint"])
        out.append(ObjectSpec(**r))
    ids = Counter((o.class_name, o.instance_id) for o in out)
    dup = [k for k, n in ids.items() if n > 1]
    if dup:
        raise ValueError(f"duplicate objects in catalogue: {dup[:3]}")
    return out
