"""Command-line entry point: ``droneset <command> ...``.

Every command takes ``--seed`` and is deterministic for a fixed seed. The
exit status is 0 only when the command fully succeeded.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shlex
import sys
import time
import zlib
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datastore, oracle, protocols
from .arena import generate_layout
from .config import SimulationConfig, default_config, dump_config, read_config
from .flightctl import MissionAborted, run_mission
from .vehicle import ShakeModel

log = logging.getLogger("droneset")


def mission_seed(seed: int, class_name: str, instance_id: str) -> int:
    """Per-object seed, independent of the order objects are flown in."""
    key = zlib.crc32(f"{class_name}/{instance_id}".encode())
    return int(np.random.SeedSequence([seed, key]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _write_text(path: str | None, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


# --------------------------------------------------------------------------
# commands


def cmd_layout(args) -> int:
    cfg = SimulationConfig(layout=generate_layout(args.stops, args.radius, args.seed))
    _write_text(args.out, dump_config(cfg))
    return 0


def _load_sim(args) -> SimulationConfig:
    cfg = read_config(args.config) if args.config else default_config()
    if args.no_shake:
        cfg = replace(cfg, shake=None)
    elif args.sigma_pos is not None or args.sigma_yaw is not None or args.tau is not None:
        base = cfg.shake or ShakeModel()
        cfg = replace(cfg, shake=ShakeModel(
            sigma_pos=base.sigma_pos if args.sigma_pos is None else args.sigma_pos,
            sigma_yaw=base.sigma_yaw if args.sigma_yaw is None else args.sigma_yaw,
            tau=base.tau if args.tau is None else args.tau,
        ))
    return cfg


def _fly_one(cfg: SimulationConfig, obj, seed: int, out: Path, log_dir):
    s = mission_seed(seed, obj.class_name, obj.instance_id)
    mlog = run_mission(
        cfg.layout, obj, cfg.mission, cfg.gains, cfg.shake, s,
        degradation=replace(cfg.degradation, seed=s), vehicle=cfg.vehicle,
        ranges=cfg.ranges, detector=cfg.detector,
    )
    if log_dir is not None:
        p = Path(log_dir) / obj.class_name / f"{obj.instance_id}.jsonl"
        p.parent.mkdir(parents=True, exist_ok=True)
        mlog.write_jsonl(p)
    return datastore.write_object(mlog, obj, out, overwrite=True), mlog


def cmd_fly(args) -> int:
    cfg = _load_sim(args)
    if args.catalog:
        objects = datastore.catalog_from_yaml(Path(args.catalog).read_text())
    else:
        objects = datastore.default_catalog(args.classes, args.objects_per_class, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = []
    t0 = time.perf_counter()
    for k, obj in enumerate(objects):
        done = datastore.object_dir(out, obj) / datastore.ANNOTATIONS_NAME
        if args.resume and done.exists():
            continue
        try:
            n, mlog = _fly_one(cfg, obj, args.seed, out, args.log_dir)
        except MissionAborted as exc:
            failures.append(f"{obj.class_name}/{obj.instance_id}: {exc}")
            log.error("mission aborted for %s/%s: %s", obj.class_name, obj.instance_id, exc)
            continue
        log.info("[%d/%d] %s/%s: %d files, %.1f s simulated, %.1f s elapsed", k + 1, len(objects),
                 obj.class_name, obj.instance_id, n, mlog.duration, time.perf_counter() - t0)
    groups: dict[str, list[str]] = defaultdict(list)
    for obj in objects:
        groups[obj.class_name].append(obj.instance_id)
    manifest = datastore.DatasetManifest.build(
        groups, views_per_object=len(cfg.layout.stops), frames_per_view=cfg.mission.frames_per_stop, root=out)
    datastore.write_manifest(out, manifest)
    print(f"manifest: {len(manifest.classes)} classes x {manifest.objects_per_class} objects x "
          f"{manifest.views_per_object} views x {manifest.frames_per_view} frames = "
          f"{manifest.total_images} images")
    if failures:
        print(f"{len(failures)} missions aborted:", *failures, sep="\n  ", file=sys.stderr)
        return 1
    return 0


def cmd_validate(args) -> int:
    report = datastore.validate(args.root)
    print(report.summary())
    return 0 if report.ok else 1


def _split_config(args) -> tuple[str, protocols.SplitConfig]:
    if args.preset:
        strategy, cfg = protocols.PRESET_CONFIGS[args.preset]
        return args.strategy or strategy, cfg
    missing = [n for n in ("C", "O", "P", "E") if getattr(args, n) is None]
    if missing:
        raise SystemExit(f"split: give --preset or all of -C -O -P -E (missing {missing})")
    return args.strategy or "custom", protocols.SplitConfig(args.C, args.O, args.P, args.E)


def cmd_split(args) -> int:
    strategy, cfg = _split_config(args)
    ds = datastore.read_dataset(args.root, force=args.force)
    try:
        manifest = protocols.make_split(ds, cfg, strategy, args.seed, test_objects_per_class=args.test_objects)
    except protocols.SplitInfeasible as exc:
        print(f"split infeasible: {exc}", file=sys.stderr)
        return 1
    _write_text(args.out, manifest.dumps())
    print(f"{strategy}: C={cfg.C} O/C={cfg.O_per_C} P/O={cfg.P_per_O} E/P={cfg.E_per_P} -> D={cfg.D}; "
          f"train {len(manifest.train)}, test {len(manifest.test)}", file=sys.stderr)
    return 0


def cmd_merge_plan(args) -> int:
    try:
        plan = protocols.build_merge_plan(protocols.MergeManifest.load(args.manifest), args.seed)
    except ValueError as exc:
        print(f"merge plan rejected: {exc}", file=sys.stderr)
        return 1
    _write_text(args.out, json.dumps(plan.to_dict(), indent=1, sort_keys=True) + "\n")
    return 0


def _stub_spec(args, frontal=None) -> oracle.StubOracleSpec:
    return oracle.StubOracleSpec(
        mode=args.stub, base_accuracy=args.base, decay=args.decay, seed=args.oracle_seed,
        shake_scale_px=args.shake_scale, frontal=frontal or {},
    )


def _endpoint(args):
    if args.oracle:
        return oracle.SubprocessOracle(shlex.split(args.oracle), window=args.window, timeout=args.timeout)
    return oracle.StubOracle(_stub_spec(args))


def cmd_attack(args) -> int:
    ds = datastore.read_dataset(args.root, force=args.force)
    spec = protocols.AttackSpec(tuple(args.delta), args.pairs_per_class, args.seed)
    endpoint = _endpoint(args)
    try:
        if args.frontal:
            table = protocols.AccuracyTable.from_csv(Path(args.frontal).read_text())
        else:
            table = protocols.measure_accuracy_table(ds, endpoint, frames_per_view=args.frontal_frames)
        if args.table_out:
            _write_text(args.table_out, table.to_csv())
        frontal = protocols.assign_frontal(table)
        plan = protocols.sample_attack_pairs(ds, frontal, spec)
        try:
            result = protocols.run_attack(plan.pairs, endpoint, ds.root)
            code = 0
        except protocols.AttackAborted as exc:
            print(f"attack aborted, partial curve saved: {exc.cause}", file=sys.stderr)
            result, code = exc.result, 1
    except oracle.OracleError as exc:
        print(f"oracle failure: {exc}", file=sys.stderr)
        return 1
    finally:
        endpoint.close()
    _write_text(args.out, result.to_csv())
    for s in plan.shortfalls:
        print(f"shortfall: {s.class_name} delta={s.delta_theta}: {s.sampled}/{s.requested} ({s.reason})",
              file=sys.stderr)
    if args.report_out:
        report = {
            "frontal": frontal,
            "pairs": len(plan.pairs),
            "sources_checked": result.sources_checked,
            "sources_dropped": result.sources_dropped,
            "excluded_by_symmetry": [list(e) for e in plan.excluded],
            "shortfalls": [vars(s) for s in plan.shortfalls],
            "complete": result.complete,
        }
        _write_text(args.report_out, json.dumps(report, indent=1, sort_keys=True) + "\n")
    return code


def _read_curve(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args) -> int:
    runs = {Path(p).stem: _read_curve(p) for p in args.curves}
    if len(runs) != len(args.curves):
        print("report: curve files need distinct names", file=sys.stderr)
        return 1
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "delta_theta", "class", "n", "correct", "accuracy", "ci_low", "ci_high"])
    pooled: dict[tuple[int, str], list[int]] = defaultdict(lambda: [0, 0])
    for run in sorted(runs):
        for r in runs[run]:
            n, k, dt = int(r["n"]), int(r["correct"]), int(r["delta_theta"])
            pooled[(dt, r["class"])][0] += n
            pooled[(dt, r["class"])][1] += k
            lo, hi = protocols.wilson_interval(k, n)
            w.writerow([run, dt, r["class"], n, k, r["accuracy"], f"{lo:.6f}", f"{hi:.6f}"])
    if len(runs) > 1:
        for (dt, cls), (n, k) in sorted(pooled.items()):
            lo, hi = protocols.wilson_interval(k, n)
            w.writerow(["pooled", dt, cls, n, k, f"{k / n:.6f}" if n else "", f"{lo:.6f}", f"{hi:.6f}"])
    _write_text(args.out, buf.getvalue())

    if args.scatter:
        xr, yr = args.scatter
        if xr not in runs or yr not in runs:
            print(f"report: scatter runs must be among {sorted(runs)}", file=sys.stderr)
            return 1

        def per_class(rows):
            acc: dict[str, list[int]] = defaultdict(lambda: [0, 0])
            for r in rows:
                if r["class"] != "*" and (args.delta is None or int(r["delta_theta"]) == args.delta):
                    acc[r["class"]][0] += int(r["n"])
                    acc[r["class"]][1] += int(r["correct"])
            return {c: k / n for c, (n, k) in acc.items() if n}

        xs, ys = per_class(runs[xr]), per_class(runs[yr])
        sbuf = io.StringIO()
        sw = csv.writer(sbuf, lineterminator="\n")
        sw.writerow(["class", xr, yr])
        for c in sorted(set(xs) & set(ys)):
            sw.writerow([c, f"{xs[c]:.6f}", f"{ys[c]:.6f}"])
        _write_text(args.scatter_out, sbuf.getvalue())
    return 0


def cmd_oracle_stub(args) -> int:
    spec = _stub_spec(args)
    return oracle.serve(oracle.StubOracle(spec), sys.stdin, sys.stdout)


# --------------------------------------------------------------------------
# parser


def _stub_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--stub", choices=[m.value for m in oracle.StubMode], default="perfect",
                   help="built-in stub oracle mode")
    p.add_argument("--base", type=float, default=1.0, help="stub base accuracy")
    p.add_argument("--decay", type=float, default=0.0,
                   help="stub accuracy loss per 45 degrees (pose-biased) or per shake_scale px")
    p.add_argument("--shake-scale", type=float, default=4.0, help="bbox offset in px per decay step")
    p.add_argument("--oracle-seed", type=int, default=0, help="stub coin-flip seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="droneset", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("layout", help="emit an arena/simulation config file")
    p.add_argument("--stops", type=int, default=8)
    p.add_argument("--radius", type=float, default=1.5, help="stop circle radius in metres")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("-o", "--out", default="-")
    p.set_defaults(func=cmd_layout)

    p = sub.add_parser("fly", help="fly one mission per object and write the dataset")
    p.add_argument("--config", help="simulation config from `layout` (default: 8 stops)")
    p.add_argument("--catalog", help="YAML object catalogue (default: procedural objects)")
    p.add_argument("--classes", type=int, default=25)
    p.add_argument("--objects-per-class", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--log-dir", help="write one JSON-lines tick log per mission here")
    p.add_argument("--resume", action="store_true", help="skip objects already written")
    p.add_argument("--no-shake", action="store_true")
    p.add_argument("--sigma-pos", type=float)
    p.add_argument("--sigma-yaw", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fly)

    p = sub.add_parser("validate", help="check a dataset root")
    p.add_argument("root")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("split", help="emit a diversity-budget train/test split manifest")
    p.add_argument("root")
    p.add_argument("--preset", choices=sorted(protocols.PRESET_CONFIGS))
    p.add_argument("--strategy", choices=protocols.STRATEGIES)
    p.add_argument("-C", type=int)
    p.add_argument("-O", type=int, help="objects per class")
    p.add_argument("-P", type=int, help="poses per object")
    p.add_argument("-E", type=int, help="examples per pose")
    p.add_argument("--test-objects", type=int, help="held-out objects per class (default: all unused)")
    p.add_argument("--force", action="store_true", help="accept a root that fails validation")
    p.add_argument("-o", "--out", default="-")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("merge-plan", help="sample indices for a class-merge manifest")
    p.add_argument("manifest")
    p.add_argument("-o", "--out", default="-")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_merge_plan)

    p = sub.add_parser("attack", help="run angle-perturbation curves against an oracle")
    p.add_argument("root")
    p.add_argument("--oracle", help="command line of an external line-protocol classifier")
    _stub_args(p)
    p.add_argument("--window", type=int, default=16, help="requests in flight")
    p.add_argument("--timeout", type=float, default=30.0, help="seconds per response")
    p.add_argument("--delta", type=int, nargs="+", default=list(protocols.DELTA_THETAS))
    p.add_argument("--pairs-per-class", type=int, default=5)
    p.add_argument("--frontal", help="accuracy table CSV (class,view_degrees,accuracy); default: measure")
    p.add_argument("--frontal-frames", type=int, help="frames per view used when measuring the table")
    p.add_argument("--table-out", help="write the measured accuracy table")
    p.add_argument("--report-out", help="write pair and shortfall diagnostics as JSON")
    p.add_argument("--force", action="store_true")
    p.add_argument("-o", "--out", default="-")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("report", help="aggregate attack curves and build per-class scatter tables")
    p.add_argument("curves", nargs="+")
    p.add_argument("--scatter", nargs=2, metavar=("X_RUN", "Y_RUN"))
    p.add_argument("--delta", type=int, help="restrict the scatter to one delta_theta")
    p.add_argument("--scatter-out", default="-")
    p.add_argument("-o", "--out", default="-")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("oracle-stub", help="serve a stub oracle over stdin/stdout")
    _stub_args(p)
    p.add_argument("--seed", type=int, default=0, help="alias for --oracle-seed when that is unset")
    p.set_defaults(func=cmd_oracle_stub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "oracle-stub" and args.oracle_seed == 0:
        args.oracle_seed = args.seed
    try:
        return int(args.func(args) or 0)
    except datastore.DatasetNotValid as exc:
        print(f"{exc}\n{exc.report.summary()}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
