"""Command-line entry point: ``occlabel <subcommand> ...``.

Exit status is 0 on success, 1 for invalid input or configuration and 2 for
I/O and file-format errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, FormatError, MisalignedSequences, OccLabelError

log = logging.getLogger("occlabel")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


# --------------------------------------------------------------------------- helpers

def _set_threads(n: int) -> None:
    import numba

    if n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _config_from_args(args):
    from .pipeline import SequenceConfig

    overrides = {}
    for f in dataclasses.fields(SequenceConfig):
        v = getattr(args, "cfg_" + f.name, None)
        if v is not None:
            overrides[f.name] = v
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config:
        return SequenceConfig.from_file(args.config, overrides)
    return SequenceConfig.from_mapping(overrides)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    from .pipeline import SequenceConfig

    g = p.add_argument_group("pipeline parameters (override --config)")
    for f in dataclasses.fields(SequenceConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if isinstance(default, bool):
            g.add_argument(flag, dest="cfg_" + f.name, action=argparse.BooleanOptionalAction, default=None,
                           help=f"default {default}")
        else:
            g.add_argument(flag, dest="cfg_" + f.name, type=type(default), default=None, metavar="X",
                           help=f"default {default}")


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        if not rows:
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    from .simulator import generate_sequence, load_scene

    scene = load_scene(args.scene)
    manifest = generate_sequence(scene, args.out, seed=args.seed)
    print(f"wrote {manifest['scan_count']} scans of {manifest['sequence_id']} to {args.out}")
    return EXIT_OK


def cmd_label(args) -> int:
    from .pipeline import label_sequence
    from .plotting import plot_timing

    cfg = _config_from_args(args)
    out = Path(args.out)
    summary = label_sequence(args.scans, args.trajectory, cfg, out)
    records = []
    with open(out / "timing.csv") as f:
        for row in csv.DictReader(f):
            records.append({k: float(v) for k, v in row.items() if k not in ("scan_id", "total")})
    if records:
        plot_timing(records, out / "timing.png", title=f"{summary['scan_count']} scans")
    t = summary["throughput"]
    print(f"labeled {summary['scan_count']} scans, dynamic fraction {summary['dynamic_fraction']:.5f}, "
          f"{summary['per_scan_mean_seconds']:.3f} s/scan")
    for stage, mean in t.get("mean", {}).items():
        print(f"  {stage:<10} mean {mean:.4f} s  p95 {t['p95'][stage]:.4f} s")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import compute_iou, load_label_dir
    from .plotting import plot_iou

    pred = load_label_dir(args.pred)
    truth = load_label_dir(args.truth)
    report = compute_iou(pred, truth)
    rep_path = Path(args.report)
    rep_path.parent.mkdir(parents=True, exist_ok=True)
    summary = report.summary()
    rows = report.rows()
    if rep_path.suffix.lower() == ".json":
        rep_path.write_text(json.dumps({"summary": summary, "scans": rows}, indent=2) + "\n")
    else:
        lines = [f"{k}: {v}" for k, v in summary.items()]
        lines += ["", "scan_id tp fp fn iou"]
        lines += [f"{r['scan_id']} {r['tp']} {r['fp']} {r['fn']} {r['iou']:.6f}" for r in rows]
        rep_path.write_text("\n".join(lines) + "\n")
    _write_csv(rep_path.with_suffix(".csv"), rows)
    plot_iou(report, rep_path.with_suffix(".png"))
    print(f"sequence IoU {summary['sequence_iou']:.4f}, mean per-scan IoU {summary['mean_iou']:.4f} "
          f"over {summary['scans']} scans")
    return EXIT_OK


def _paired_inputs(scan_dir, label_dir):
    from .formats import LABEL_SUFFIX, list_scans

    scans = list_scans(scan_dir)
    label_dir = Path(label_dir)
    labels = [label_dir / (p.stem + LABEL_SUFFIX) for p in scans]
    missing = [p.name for p in labels if not p.is_file()]
    if missing:
        raise MisalignedSequences(f"{len(missing)} scans have no label file, first: {missing[0]}")
    return scans, labels


def cmd_clean_map(args) -> int:
    from .formats import read_trajectory, write_ply
    from .mapping import build_clean_map
    from .plotting import plot_map

    scans, labels = _paired_inputs(args.scans, args.labels)
    traj = read_trajectory(args.trajectory)
    static, dynamic = build_clean_map(scans, labels, traj, args.max_range, args.downsample)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ply(out / "static_map.ply", static.xyz, static.intensity, static.label)
    write_ply(out / "dynamic_layer.ply", dynamic.xyz, dynamic.intensity, dynamic.label)
    _write_csv(out / "map_summary.csv", [
        {"layer": "static", "points": len(static), "voxel": args.downsample, "max_range": args.max_range},
        {"layer": "dynamic", "points": len(dynamic), "voxel": args.downsample, "max_range": args.max_range},
    ])
    plot_map(static, dynamic, out / "map_topdown.png")
    print(f"static map {len(static)} points, dynamic layer {len(dynamic)} points -> {out}")
    return EXIT_OK


def cmd_export_ply(args) -> int:
    from .formats import read_labels, read_scan, read_trajectory, write_ply
    from .scan import undistort

    scan = read_scan(args.scan)
    if args.labels:
        labels = read_labels(args.labels, scan.rows, scan.cols)
    else:
        labels = np.zeros((scan.rows, scan.cols), np.uint32)
    if args.trajectory:
        scan_w = undistort(scan, read_trajectory(args.trajectory))
        xyz = scan_w.xyz
    else:
        xyz = scan.xyz
    v = scan.valid
    write_ply(args.out, xyz[v], scan.intensity[v], labels[v], colorize=not args.no_color)
    print(f"wrote {int(v.sum())} points to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occlabel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=0, help="intra-scan threads (0 = auto)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a synthetic sequence")
    s.add_argument("--scene", required=True, help="preset name or scene YAML file")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("label", help="label a scan sequence")
    s.add_argument("--scans", required=True, help="directory of .bin scans")
    s.add_argument("--trajectory", required=True, help="TUM trajectory file")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="key = value file")
    s.add_argument("--seed", type=int, default=None)
    _add_config_flags(s)
    s.set_defaults(func=cmd_label)

    s = sub.add_parser("eval", help="score labels against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--report", required=True, help="report path (.json or text); .csv and .png written beside it")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("clean-map", help="aggregate static points into a downsampled map")
    s.add_argument("--scans", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--trajectory", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-range", type=float, default=30.0)
    s.add_argument("--downsample", type=float, default=0.1)
    s.set_defaults(func=cmd_clean_map)

    s = sub.add_parser("export-ply", help="write one labeled scan as colorized PLY")
    s.add_argument("--scan", required=True)
    s.add_argument("--labels")
    s.add_argument("--trajectory", help="undistort into the world frame")
    s.add_argument("--out", required=True)
    s.add_argument("--no-color", action="store_true")
    s.set_defaults(func=cmd_export_ply)
    return p


def _exit_code(exc: BaseException) -> int:
    cause = getattr(exc, "cause", None)
    if cause is not None:
        return _exit_code(cause)
    if isinstance(exc, (FormatError, OSError)):
        return EXIT_IO
    return EXIT_INVALID


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        return args.func(args)
    except (OccLabelError, OSError, ValueError) as exc:
        kind = "error" if not isinstance(exc, (ConfigError, ValueError)) else "invalid input"
        print(f"occlabel {args.command}: {kind}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
