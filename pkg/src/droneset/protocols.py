"""Experiment protocols over a pose-annotated dataset.

Covers data-driven frontal poses, angle-perturbation attack schedules and
their evaluation against an oracle, diversity-budget train/test splits and
class-merge sampling plans.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import yaml

from .datastore import POSE_GRID, Dataset, DatasetRecord

DELTA_THETAS = (0, 45, 90, 135, 180)


def _on_grid(a) -> int:
    if isinstance(a, bool) or not float(a).is_integer() or int(a) % 45:
        raise ValueError(f"{a!r} is not on the 45 degree grid")
    return int(a) % 360


def angular_distance(a, b) -> int:
    """Minimal angular distance between two grid views, in degrees."""
    d = abs(_on_grid(a) - _on_grid(b)) % 360
    return min(d, 360 - d)


def _stable_key(*parts) -> int:
    return zlib.crc32("\x1f".join(str(p) for p in parts).encode())


# --------------------------------------------------------------------------
# frontal pose


class AccuracyTable:
    """Per-class, per-view recognition accuracy."""

    def __init__(self, values: Mapping[tuple[str, int], float]):
        self.values: dict[tuple[str, int], float] = {}
        for (cls, view), acc in values.items():
            acc = float(acc)
            if not 0.0 <= acc <= 1.0 or math.isnan(acc):
                raise ValueError(f"accuracy for {cls}@{view} outside [0, 1]: {acc}")
            self.values[(str(cls), _on_grid(view))] = acc

    @property
    def classes(self) -> list[str]:
        return sorted({c for c, _ in self.values})

    def check_complete(self) -> None:
        for cls in self.classes:
            missing = [v for v in POSE_GRID if (cls, v) not in self.values]
            if missing:
                raise ValueError(f"accuracy table for {cls!r} lacks views {missing}")
        if not self.values:
            raise ValueError("accuracy table is empty")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "view_degrees", "accuracy"])
        for (cls, view) in sorted(self.values):
            w.writerow([cls, view, f"{self.values[(cls, view)]:.6f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyTable":
        rows = csv.DictReader(io.StringIO(text))
        return cls({(r["class"], int(r["view_degrees"])): float(r["accuracy"]) for r in rows})


def assign_frontal(table: AccuracyTable) -> dict[str, int]:
    """Per class, the view of highest accuracy; ties go to the smallest angle."""
    table.check_complete()
    out = {}
    for cls in table.classes:
        best = max(POSE_GRID, key=lambda v: (table.values[(cls, v)], -v))
        out[cls] = best
    return out


# --------------------------------------------------------------------------
# attack schedules


@dataclass(frozen=True)
class AttackSpec:
    delta_thetas: tuple[int, ...] = DELTA_THETAS
    pairs_per_class: int = 5
    seed: int = 0

    def __post_init__(self):
        dts = tuple(int(d) for d in self.delta_thetas)
        bad = [d for d in dts if d not in DELTA_THETAS]
        if bad or not dts:
            raise ValueError(f"delta_theta values must be drawn from {DELTA_THETAS}, got {bad or dts}")
        if len(set(dts)) != len(dts):
            raise ValueError("delta_theta values must be distinct")
        if self.pairs_per_class < 1:
            raise ValueError("pairs_per_class must be >= 1")
        object.__setattr__(self, "delta_thetas", dts)


@dataclass(frozen=True)
class AttackPair:
    source: DatasetRecord
    target: DatasetRecord
    delta_theta: int


@dataclass(frozen=True)
class Shortfall:
    class_name: str
    delta_theta: int
    requested: int
    sampled: int
    reason: str


@dataclass
class AttackPlan:
    pairs: list[AttackPair] = field(default_factory=list)
    shortfalls: list[Shortfall] = field(default_factory=list)
    excluded: list[tuple[str, str, int]] = field(default_factory=list)  # (class, object, delta) by symmetry

    def __len__(self) -> int:
        return len(self.pairs)


def symmetry_degenerate(symmetry_degrees: int, delta_theta: int) -> bool:
    """A nonzero rotation that is a multiple of the symmetry leaves the object unchanged."""
    return delta_theta > 0 and delta_theta % symmetry_degrees == 0


def sample_attack_pairs(
    dataset: Dataset | Iterable[DatasetRecord],
    frontal_map: Mapping[str, int],
    spec: AttackSpec,
    *,
    source_ok: Optional[Callable[[DatasetRecord], bool]] = None,
) -> AttackPlan:
    """Sample (source, perturbed, delta) triples per class and delta.

    Sources are frames of the class's frontal view; targets are frames of
    the same object at angular distance delta (delta 0 means another frame
    of the same view). ``source_ok`` restricts sources, e.g. to images the
    oracle already classifies correctly. Pairs are drawn without
    replacement; any (class, delta) cell that cannot be filled is recorded
    as a shortfall.
    """
    by_object: dict[tuple[str, str], dict[int, list[DatasetRecord]]] = defaultdict(lambda: defaultdict(list))
    for rec in dataset:
        by_object[rec.object_key][rec.view_degrees].append(rec)
    classes = sorted({c for c, _ in by_object})
    missing = [c for c in classes if c not in frontal_map]
    if missing:
        raise ValueError(f"frontal map lacks classes {missing}")

    plan = AttackPlan()
    for ci, cls in enumerate(classes):
        front = _on_grid(frontal_map[cls])
        objects = sorted(k for k in by_object if k[0] == cls)
        for dt in spec.delta_thetas:
            # candidate blocks: (sources, targets) per object, enumerated lazily by index
            blocks = []
            for key in objects:
                views = by_object[key]
                sources = sorted(views.get(front, []), key=lambda r: r.frame_index)
                if source_ok is not None:
                    sources = [r for r in sources if source_ok(r)]
                if not sources:
                    continue
                sym = sources[0].annotation.symmetry_degrees
                if symmetry_degenerate(sym, dt):
                    plan.excluded.append((cls, key[1], dt))
                    continue
                target_views = sorted({(front + dt) % 360, (front - dt) % 360})
                targets = [r for v in target_views for r in sorted(views.get(v, []), key=lambda r: r.frame_index)]
                if not targets:
                    continue
                blocks.append((sources, targets, dt == 0))
            sizes = [len(s) * len(t) - (len(s) if same else 0) for s, t, same in blocks]
            total = sum(sizes)
            want = spec.pairs_per_class
            if total < want:
                reason = "no eligible pairs" if total == 0 else "too few eligible pairs"
                if total == 0 and any(e[0] == cls and e[2] == dt for e in plan.excluded):
                    reason = "every object excluded by rotational symmetry"
                plan.shortfalls.append(Shortfall(cls, dt, want, total, reason))
            if total == 0:
                continue
            rng = np.random.default_rng([spec.seed, ci, dt, _stable_key(cls)])
            picks = np.sort(rng.choice(total, size=min(want, total), replace=False))
            offsets = np.cumsum([0] + sizes)
            for idx in picks:
                b = int(np.searchsorted(offsets, idx, side="right") - 1)
                sources, targets, same = blocks[b]
                local = int(idx - offsets[b])
                if same:
                    # skip the diagonal: a frame is never paired with itself
                    si, ti = divmod(local, len(targets) - 1)
                    src = sources[si]
                    others = [t for t in targets if t.frame_index != src.frame_index]
                    tgt = others[ti]
                else:
                    si, ti = divmod(local, len(targets))
                    src, tgt = sources[si], targets[ti]
                plan.pairs.append(AttackPair(src, tgt, dt))
    return plan


def wilson_interval(k: int, n: int, z: float = 1.959964) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    p = k / n
    den = 1.0 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return (max(0.0, mid - half), min(1.0, mid + half))


@dataclass
class AttackResult:
    """Counts of correctly classified perturbed images per delta and class."""

    delta_thetas: tuple[int, ...]
    counts: dict[tuple[str, int], list[int]] = field(default_factory=dict)  # (class, dt) -> [n, correct]
    sources_checked: int = 0
    sources_dropped: int = 0
    complete: bool = True

    def add(self, cls: str, dt: int, correct: bool) -> None:
        c = self.counts.setdefault((cls, dt), [0, 0])
        c[0] += 1
        c[1] += int(correct)

    def totals(self, dt: int) -> tuple[int, int]:
        n = sum(v[0] for (c, d), v in self.counts.items() if d == dt)
        k = sum(v[1] for (c, d), v in self.counts.items() if d == dt)
        return n, k

    @property
    def curve(self) -> dict[int, float]:
        out = {}
        for dt in self.delta_thetas:
            n, k = self.totals(dt)
            out[dt] = k / n if n else math.nan
        return out

    def class_curves(self) -> dict[str, dict[int, float]]:
        out: dict[str, dict[int, float]] = defaultdict(dict)
        for (cls, dt), (n, k) in sorted(self.counts.items()):
            out[cls][dt] = k / n if n else math.nan
        return dict(out)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["delta_theta", "class", "n", "correct", "accuracy"])
        for dt in self.delta_thetas:
            n, k = self.totals(dt)
            w.writerow([dt, "*", n, k, f"{k / n:.6f}" if n else ""])
        for (cls, dt) in sorted(self.counts, key=lambda x: (x[1], x[0])):
            n, k = self.counts[(cls, dt)]
            w.writerow([dt, cls, n, k, f"{k / n:.6f}" if n else ""])
        return buf.getvalue()


class AttackAborted(RuntimeError):
    def __init__(self, result: AttackResult, cause: Exception):
        super().__init__(f"attack aborted: {cause}")
        self.result = result
        self.cause = cause


def run_attack(pairs: Sequence[AttackPair], oracle, root: str | Path, *, chunk: int = 512) -> AttackResult:
    """Classify sources then perturbed targets; sources the oracle gets wrong are dropped.

    ``oracle`` is anything with ``classify_batch(requests)`` (see
    :mod:`droneset.oracle`). On an oracle failure the counts gathered so far
    are attached to :class:`AttackAborted`.
    """
    from .oracle import OracleError, OracleRequest

    root = Path(root)
    dts = tuple(sorted({p.delta_theta for p in pairs})) or DELTA_THETAS
    result = AttackResult(dts)
    next_id = itertools.count()

    def ask(records: list[DatasetRecord]) -> dict[str, str]:
        labels: dict[str, str] = {}
        for i in range(0, len(records), chunk):
            part = records[i : i + chunk]
            reqs = [OracleRequest(next(next_id), str(root / r.relpath)) for r in part]
            resps = oracle.classify_batch(reqs)
            for r, resp in zip(part, resps):
                labels[r.relpath] = resp.label
        return labels

    try:
        sources = sorted({p.source.relpath: p.source for p in pairs}.values(), key=lambda r: r.relpath)
        src_labels = ask(sources)
        result.sources_checked = len(sources)
        kept = [p for p in pairs if src_labels[p.source.relpath] == p.source.class_name]
        result.sources_dropped = len(pairs) - len(kept)
        for i in range(0, len(kept), chunk):
            part = kept[i : i + chunk]
            labels = ask([p.target for p in part])
            for p in part:
                result.add(p.source.class_name, p.delta_theta, labels[p.target.relpath] == p.target.class_name)
    except OracleError as exc:
        result.complete = False
        raise AttackAborted(result, exc) from exc
    return result


def measure_accuracy_table(dataset: Dataset, oracle, *, frames_per_view: Optional[int] = None) -> AccuracyTable:
    """Oracle accuracy per (class, view), the basis of the frontal-pose definition."""
    from .oracle import OracleRequest

    recs = [r for r in dataset.records() if frames_per_view is None or r.frame_index < frames_per_view]
    resps = oracle.classify_batch([OracleRequest(i, str(dataset.path(r))) for i, r in enumerate(recs)])
    hits: dict[tuple[str, int], list[int]] = defaultdict(lambda: [0, 0])
    for r, resp in zip(recs, resps):
        h = hits[(r.class_name, r.view_degrees)]
        h[0] += 1
        h[1] += int(resp.label == r.class_name)
    return AccuracyTable({k: v[1] / v[0] for k, v in hits.items()})


# --------------------------------------------------------------------------
# diversity-budget splits

STRATEGIES = ("max-object-diversity", "max-pose-diversity", "max-camera-shake", "custom")


@dataclass(frozen=True)
class SplitConfig:
    C: int
    O_per_C: int
    P_per_O: int
    E_per_P: int

    def __post_init__(self):
        for name in ("C", "O_per_C", "P_per_O", "E_per_P"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {v!r}")

    @property
    def D(self) -> int:
        return self.C * self.O_per_C * self.P_per_O * self.E_per_P

    def to_dict(self) -> dict:
        return {"C": self.C, "O_per_C": self.O_per_C, "P_per_O": self.P_per_O,
                "E_per_P": self.E_per_P, "D": self.D}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitConfig":
        # D is always recomputed; a stored value is ignored
        return cls(int(d["C"]), int(d["O_per_C"]), int(d["P_per_O"]), int(d["E_per_P"]))


PRESET_CONFIGS = {
    "object-vs-pose/max-object-diversity": ("max-object-diversity", SplitConfig(23, 16, 1, 30)),
    "object-vs-pose/max-pose-diversity": ("max-pose-diversity", SplitConfig(23, 2, 8, 30)),
    "pose-vs-shake/max-pose-diversity": ("max-pose-diversity", SplitConfig(23, 16, 8, 3)),
    "pose-vs-shake/max-camera-shake": ("max-camera-shake", SplitConfig(23, 16, 1, 30)),
}


class SplitInfeasible(ValueError):
    def __init__(self, factor: str, requested: int, available: int, detail: str = ""):
        msg = f"{factor}={requested} exceeds availability {available}"
        super().__init__(msg + (f" ({detail})" if detail else ""))
        self.factor = factor
        self.requested = requested
        self.available = available


@dataclass
class SplitManifest:
    strategy: str
    seed: int
    config: SplitConfig
    train: list[str]
    test: list[str]
    train_objects: list[str]
    test_objects: list[str]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "config": self.config.to_dict(),
            "train_size": len(self.train),
            "test_size": len(self.test),
            "train_objects": self.train_objects,
            "test_objects": self.test_objects,
            "train": self.train,
            "test": self.test,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def spread_views(k: int, offset: int = 0) -> list[int]:
    """``k`` grid views with the largest minimum circular gap, rotated by ``offset`` steps."""
    if not 1 <= k <= 8:
        raise ValueError("between 1 and 8 views")
    best, best_key = None, None
    for combo in itertools.combinations(range(8), k):
        gaps = [(combo[(i + 1) % k] - combo[i]) % 8 or 8 for i in range(k)]
        key = (min(gaps), -max(gaps))
        if best_key is None or key > best_key:
            best, best_key = combo, key
    return sorted(((s + offset) % 8) * 45 for s in best)


def make_split(
    dataset: Dataset | Iterable[DatasetRecord],
    cfg: SplitConfig,
    strategy: str = "custom",
    seed: int = 0,
    *,
    test_objects_per_class: Optional[int] = None,
) -> SplitManifest:
    """Draw a train split with exactly ``cfg.D`` records and a held-out test split.

    Classes and objects are drawn at random. ``max-pose-diversity`` spreads
    each object's views as far apart as the grid allows; the other
    strategies draw views at random. ``max-camera-shake`` spreads the kept
    frames evenly over the hover sequence; the rest draw frames at random.
    The test split holds every frame of the unused objects of the chosen
    classes (at least one per class), so no object crosses the split.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    index: dict[str, dict[str, dict[int, list[DatasetRecord]]]] = defaultdict(lambda: defaultdict(lambda: defaultdict(list)))
    for rec in dataset:
        index[rec.class_name][rec.instance_id][rec.view_degrees].append(rec)

    n_test = 1 if test_objects_per_class is None else test_objects_per_class
    if n_test < 1:
        raise ValueError("at least one test object per class is required")

    def eligible(cls: str) -> bool:
        objs = index[cls]
        full = [o for o, views in objs.items()
                if len(views) >= cfg.P_per_O and all(len(f) >= cfg.E_per_P for f in views.values())]
        return len(full) >= cfg.O_per_C and len(objs) >= cfg.O_per_C + n_test

    classes_all = sorted(index)
    if cfg.C > len(classes_all):
        raise SplitInfeasible("C", cfg.C, len(classes_all))
    classes_ok = [c for c in classes_all if eligible(c)]
    if cfg.C > len(classes_ok):
        max_objects = min(len(index[c]) for c in classes_all) - n_test
        max_views = min(len(v) for c in classes_all for v in index[c].values())
        max_frames = min(len(f) for c in classes_all for v in index[c].values() for f in v.values())
        for factor, want, have in (("O_per_C", cfg.O_per_C, max_objects), ("P_per_O", cfg.P_per_O, max_views),
                                   ("E_per_P", cfg.E_per_P, max_frames)):
            if want > have:
                raise SplitInfeasible(factor, want, have, "with one test object held out per class"
                                      if factor == "O_per_C" else "")
        raise SplitInfeasible("C", cfg.C, len(classes_ok), "classes meeting every other factor")

    rng = np.random.default_rng([seed, _stable_key(strategy), cfg.C, cfg.O_per_C, cfg.P_per_O, cfg.E_per_P])
    chosen = sorted(rng.choice(classes_ok, size=cfg.C, replace=False).tolist())
    train, test, train_objs, test_objs = [], [], [], []
    for cls in chosen:
        objs = index[cls]
        full = sorted(o for o, views in objs.items()
                      if len(views) >= cfg.P_per_O and all(len(f) >= cfg.E_per_P for f in views.values()))
        picked = sorted(rng.choice(full, size=cfg.O_per_C, replace=False).tolist())
        rest = sorted(set(objs) - set(picked))
        held = rest if test_objects_per_class is None else sorted(
            rng.choice(rest, size=min(n_test, len(rest)), replace=False).tolist())
        if len(held) < n_test:
            raise SplitInfeasible("O_per_C", cfg.O_per_C, len(objs) - n_test)
        for obj in picked:
            train_objs.append(f"{cls}/{obj}")
            views = sorted(objs[obj])
            if strategy == "max-pose-diversity" and len(views) == 8:
                sel = spread_views(cfg.P_per_O, int(rng.integers(8)))
            else:
                sel = sorted(rng.choice(views, size=cfg.P_per_O, replace=False).tolist())
            for v in sel:
                frames = sorted(objs[obj][v], key=lambda r: r.frame_index)
                if strategy == "max-camera-shake":
                    pos = np.linspace(0, len(frames) - 1, cfg.E_per_P)
                    keep = sorted({int(round(p)) for p in pos})
                    if len(keep) < cfg.E_per_P:
                        keep = list(range(cfg.E_per_P))
                else:
                    keep = sorted(rng.choice(len(frames), size=cfg.E_per_P, replace=False).tolist())
                train.extend(frames[i].relpath for i in keep)
        for obj in held:
            test_objs.append(f"{cls}/{obj}")
            for v in sorted(objs[obj]):
                test.extend(r.relpath for r in sorted(objs[obj][v], key=lambda r: r.frame_index))
    if len(train) != cfg.D:
        raise AssertionError(f"split produced {len(train)} records, expected {cfg.D}")
    return SplitManifest(strategy, seed, cfg, train, test, train_objs, test_objs)


# --------------------------------------------------------------------------
# class merging

DEFAULT_POOL = {"train": 1300, "test": 50}


@dataclass(frozen=True)
class MergeManifest:
    classes: dict[str, tuple[str, ...]]
    train_per_subclass: int = 650
    test_per_subclass: int = 25
    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    available: dict[str, dict[str, int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.classes:
            raise ValueError("merge manifest has no classes")
        seen: dict[str, str] = {}
        for merged, subs in self.classes.items():
            if not subs:
                raise ValueError(f"merged class {merged!r} has no sub-classes")
            for s in subs:
                if s in seen:
                    where = "twice in" if seen[s] == merged else f"in both {seen[s]!r} and"
                    raise ValueError(f"sub-class {s!r} appears {where} {merged!r}")
                seen[s] = merged
        if self.train_per_subclass < 0 or self.test_per_subclass < 0:
            raise ValueError("sample counts must be >= 0")

    @classmethod
    def from_dict(cls, d: Mapping) -> "MergeManifest":
        return cls(
            classes={str(k): tuple(str(s) for s in v) for k, v in d["classes"].items()},
            train_per_subclass=int(d.get("train_per_subclass", 650)),
            test_per_subclass=int(d.get("test_per_subclass", 25)),
            counts={k: {kk: int(vv) for kk, vv in v.items()} for k, v in (d.get("counts") or {}).items()},
            available={k: {kk: int(vv) for kk, vv in v.items()} for k, v in (d.get("available") or {}).items()},
        )

    @classmethod
    def load(cls, path: str | Path) -> "MergeManifest":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


@dataclass(frozen=True)
class SubclassSample:
    subclass: str
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]


@dataclass
class MergePlan:
    seed: int
    classes: dict[str, list[SubclassSample]]

    def sizes(self, merged: str) -> tuple[int, int]:
        subs = self.classes[merged]
        return sum(len(s.train_indices) for s in subs), sum(len(s.test_indices) for s in subs)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "classes": {
                m: {
                    "train_size": self.sizes(m)[0],
                    "test_size": self.sizes(m)[1],
                    "subclasses": [
                        {"name": s.subclass, "train": list(s.train_indices), "test": list(s.test_indices)}
                        for s in subs
                    ],
                }
                for m, subs in sorted(self.classes.items())
            },
        }


def build_merge_plan(manifest: MergeManifest, seed: int = 0) -> MergePlan:
    """Sample per-sub-class image indices for every merged class."""
    out: dict[str, list[SubclassSample]] = {}
    for merged in sorted(manifest.classes):
        samples = []
        for sub in manifest.classes[merged]:
            want = {"train": manifest.train_per_subclass, "test": manifest.test_per_subclass}
            want.update(manifest.counts.get(sub, {}))
            pool = dict(DEFAULT_POOL)
            pool.update(manifest.available.get(sub, {}))
            picks = {}
            for part in ("train", "test"):
                if want[part] > pool[part]:
                    raise ValueError(f"{sub}: {want[part]} {part} samples requested, {pool[part]} available")
                rng = np.random.default_rng([seed, _stable_key(sub, part)])
                picks[part] = tuple(sorted(int(i) for i in rng.choice(pool[part], size=want[part], replace=False)))
            samples.append(SubclassSample(sub, picks["train"], picks["test"]))
        out[merged] = samples
    return MergePlan(seed, out)
