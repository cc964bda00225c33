"""Two-pass offline labeling of a scan sequence.

Pass 1 integrates every scan in free-space-only mode so the grid knows all
space that was ever seen through.  Pass 2 integrates again with occupancy;
voxels flipping from free to occupied are candidates, and candidate points
become labels through ground removal, clustering and validation.
"""

from __future__ import annotations

import dataclasses
import json
import os
import shutil
import tempfile
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import (Cluster, Verdict, cluster_candidates_stage1, grow_clusters_stage2,
                         validate_clusters)
from .errors import ConfigError, NoPlane, OccLabelError
from .evaluation import StageTimer, measure_throughput
from .formats import (LABEL_SUFFIX, labels_to_bytes, list_scans, read_scan, read_trajectory, sha256_file,
                      write_manifest)
from .ground import compute_elevation_angles, fit_support_planes, grow_ground_mask
from .scan import OrganizedScan, Trajectory, undistort
from .voxel_grid import IntegrationMode, VoxelGrid, detect_blocked_rays, integrate_scan, point_keys


@dataclass(frozen=True)
class SequenceConfig:
    voxel_size: float = 0.3
    window: int = 5
    ratio_threshold: float = 0.6
    min_cluster_points: int = 5
    min_seed_diameter: float = 0.2
    seed_radius_factor: float = 2.0
    ground_eligible_angle: float = 30.0
    ground_distance: float = 0.25
    ground_max_tilt: float = 30.0
    ground_growth_angle: float = 10.0
    ground_min_inliers: int = 100
    ceiling_min_points: int = 500
    ransac_iterations: int = 200
    cluster_beta: float = 10.0
    feedback: bool = True
    ground_debug: bool = False
    seed: int = 0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                continue
            if f.name == "window":
                if v < 0:
                    raise ConfigError("window must be >= 0")
            elif f.name == "seed":
                if v < 0:
                    raise ConfigError("seed must be >= 0")
            elif not v > 0:
                raise ConfigError(f"{f.name} must be strictly positive, got {v}")

    @classmethod
    def from_mapping(cls, values: dict, base: SequenceConfig | None = None) -> SequenceConfig:
        """Typed construction from strings or values; unknown keys are errors."""
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(cls)}
        out = {}
        for key, raw in values.items():
            k = key.strip().replace("-", "_")
            if k not in types:
                raise ConfigError(f"unknown config key {key!r}")
            out[k] = _coerce(k, raw, types[k])
        return dataclasses.replace(base, **out)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> SequenceConfig:
        """Flat ``key = value`` text; ``#`` starts a comment."""
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        values = {}
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
        values.update(overrides or {})
        return cls.from_mapping(values)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())

    def ground_params(self) -> dict:
        return dict(eligible_angle=self.ground_eligible_angle, inlier_distance=self.ground_distance,
                    max_tilt=self.ground_max_tilt, iterations=self.ransac_iterations,
                    min_ground_inliers=self.ground_min_inliers, min_ceiling_points=self.ceiling_min_points)


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return typ(raw)
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


@dataclass(eq=False)
class ScanDiagnostics:
    candidate_mask: np.ndarray
    feedback_mask: np.ndarray
    ground_mask: np.ndarray
    window_keys: np.ndarray
    feedback_keys: np.ndarray
    clusters: list[Cluster]
    new_candidates: np.ndarray


@dataclass(eq=False)
class LabeledScan:
    scan_id: str
    labels: np.ndarray
    diagnostics: ScanDiagnostics | None = field(default=None, repr=False)
    valid_count: int | None = None

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise ValueError("labels must be a (rows, cols) array")

    @property
    def dynamic_count(self) -> int:
        return int((self.labels == 1).sum())


class PipelineError(OccLabelError):
    """A scan failed; ``scan_id`` names it and ``__cause__`` holds the original error."""

    def __init__(self, scan_id: str, cause: BaseException):
        super().__init__(f"scan {scan_id}: {cause}")
        self.scan_id = scan_id
        self.cause = cause


def _scan_id(item, i: int) -> str:
    if isinstance(item, (str, os.PathLike)):
        return Path(item).stem
    if isinstance(item, tuple):
        return str(item[0])
    return f"{i:06d}"


def _load(item) -> OrganizedScan:
    if isinstance(item, (str, os.PathLike)):
        return read_scan(item)
    if isinstance(item, tuple):
        return _load(item[1])
    return item


def run_free_space_pass(scans, traj: Trajectory, cfg: SequenceConfig | None = None,
                        timer: StageTimer | None = None) -> VoxelGrid:
    """Integrate every scan in free-space-only mode; items may be scans or paths."""
    cfg = cfg or SequenceConfig()
    grid = VoxelGrid(cfg.voxel_size)
    for i, item in enumerate(scans):
        sid = _scan_id(item, i)
        try:
            t0 = time.perf_counter()
            scan = _load(item)
            t1 = time.perf_counter()
            world = undistort(scan, traj)
            t2 = time.perf_counter()
            bf = detect_blocked_rays(scan, cfg.voxel_size)
            integrate_scan(grid, world, mode=IntegrationMode.FREE_SPACE_ONLY, blocked_from=bf)
            t3 = time.perf_counter()
        except (OccLabelError, OSError) as exc:
            raise PipelineError(sid, exc) from exc
        if timer is not None:
            timer.add("io", t1 - t0)
            timer.add("undistort", t2 - t1)
            timer.add("integrate", t3 - t2)
            timer.end_scan()
    return grid


def _ground(scan: OrganizedScan, cfg: SequenceConfig) -> np.ndarray:
    angles = compute_elevation_angles(scan)
    try:
        planes = fit_support_planes(scan, angles, cfg.seed, **cfg.ground_params())
    except NoPlane:
        return np.zeros(scan.valid.shape, bool)
    return grow_ground_mask(scan, planes, angles, cfg.ground_growth_angle)


def iter_occupancy_pass(scans, traj: Trajectory, grid: VoxelGrid, cfg: SequenceConfig | None = None,
                        timer: StageTimer | None = None, keep_diagnostics: bool = False):
    """Yield one :class:`LabeledScan` per input scan, in order."""
    cfg = cfg or SequenceConfig()
    vs = cfg.voxel_size
    window = deque(maxlen=cfg.window + 1)
    feedback = np.empty(0, np.int64)
    for i, item in enumerate(scans):
        sid = _scan_id(item, i)
        t = {}
        try:
            t0 = time.perf_counter()
            scan = _load(item)
            t["io"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            world = undistort(scan, traj)
            t["undistort"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            bf = detect_blocked_rays(scan, vs)
            res = integrate_scan(grid, world, mode=IntegrationMode.OCCUPANCY, blocked_from=bf)
            window.append(res.candidate_voxels)
            win_keys = np.unique(np.concatenate(list(window)))
            valid = scan.valid.ravel()
            keys = np.full(scan.n_points, -1, np.int64)
            keys[valid] = point_keys(world.xyz.reshape(-1, 3)[valid], vs)
            in_window = valid & np.isin(keys, win_keys)
            # accepted voxels of the previous scan count only where space was seen free before
            fb_keys = feedback
            if cfg.feedback and fb_keys.size:
                _, ever = grid.states(fb_keys)
                fb_keys = fb_keys[ever]
            else:
                fb_keys = np.empty(0, np.int64)
            in_feedback = valid & np.isin(keys, fb_keys) if fb_keys.size else np.zeros_like(valid)
            t["integrate"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            ground = _ground(scan, cfg)
            t["ground"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            cand = (in_window | in_feedback) & ~ground.ravel()
            cand_idx = np.flatnonzero(cand)
            seeds = cluster_candidates_stage1(cand_idx, world, vs, cfg.seed_radius_factor, cfg.min_seed_diameter)
            clusters = grow_clusters_stage2(seeds, scan, ground, cand, cfg.cluster_beta,
                                            xyz_world=world.xyz)
            t["cluster"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            clusters = validate_clusters(clusters, cfg.ratio_threshold, cfg.min_cluster_points)
            labels = np.zeros(scan.n_points, np.uint32)
            if cfg.ground_debug:
                labels[ground.ravel()] = 2
            accepted = [c for c in clusters if c.verdict == Verdict.ACCEPTED]
            for c in accepted:
                labels[c.point_indices] = 1
            dyn = labels == 1
            feedback = np.unique(keys[dyn]) if dyn.any() else np.empty(0, np.int64)
            t["validate"] = time.perf_counter() - t0
        except (OccLabelError, OSError) as exc:
            raise PipelineError(sid, exc) from exc
        if timer is not None:
            for k, v in t.items():
                timer.add(k, v)
            timer.end_scan()
        diag = None
        if keep_diagnostics:
            shape = scan.valid.shape
            diag = ScanDiagnostics(cand.reshape(shape), in_feedback.reshape(shape), ground, win_keys, fb_keys,
                                   clusters, res.candidate_voxels)
        yield LabeledScan(sid, labels.reshape(scan.valid.shape), diag, int(valid.sum()))


def run_occupancy_pass(scans, traj: Trajectory, grid: VoxelGrid, cfg: SequenceConfig | None = None,
                       timer: StageTimer | None = None, keep_diagnostics: bool = False) -> list[LabeledScan]:
    return list(iter_occupancy_pass(scans, traj, grid, cfg, timer, keep_diagnostics))


def label_scans(scans, traj: Trajectory, cfg: SequenceConfig | None = None,
                keep_diagnostics: bool = False) -> list[LabeledScan]:
    """Both passes over an in-memory or on-disk sequence."""
    cfg = cfg or SequenceConfig()
    scans = list(scans)
    grid = run_free_space_pass(scans, traj, cfg)
    return run_occupancy_pass(scans, traj, grid, cfg, keep_diagnostics=keep_diagnostics)


def label_sequence(scan_dir, traj_path, cfg: SequenceConfig | None, out_dir) -> dict:
    """Label every ``*.bin`` scan in ``scan_dir`` and write results to ``out_dir``.

    Outputs: ``<scan>.label`` per scan, ``manifest.json`` (deterministic:
    config, counts, hashes), ``summary.json`` and ``timing.csv`` (wall
    clock).  Everything is written to a temporary directory first and moved
    into place only after the whole sequence succeeded, so a failure leaves
    no partial outputs.
    """
    cfg = cfg or SequenceConfig()
    paths = list_scans(scan_dir)
    traj = read_trajectory(traj_path)
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        t_start = time.perf_counter()
        pass1 = StageTimer()
        grid = run_free_space_pass(paths, traj, cfg, pass1)
        pass2 = StageTimer()
        n_dyn = n_valid = 0
        label_hashes = {}
        for ls in iter_occupancy_pass(paths, traj, grid, cfg, pass2):
            t0 = time.perf_counter()
            name = ls.scan_id + LABEL_SUFFIX
            (tmp / name).write_bytes(labels_to_bytes(ls.labels))
            label_hashes[name] = sha256_file(tmp / name)
            pass2.records[-1]["io"] = pass2.records[-1].get("io", 0.0) + time.perf_counter() - t0
            n_dyn += ls.dynamic_count
            n_valid += ls.valid_count
        wall = time.perf_counter() - t_start
        n = len(paths)
        # merge both passes into one record per scan
        per_scan = []
        for r1, r2 in zip(pass1.records, pass2.records):
            rec = {k: r2.get(k, 0.0) for k in r2}
            for k, v in r1.items():
                rec[k] = rec.get(k, 0.0) + v
            per_scan.append(rec)
        stats = measure_throughput(per_scan)
        manifest = {
            "kind": "labels",
            "format_version": 1,
            "tool_version": __version__,
            "sequence_id": Path(scan_dir).resolve().parent.name,
            "scan_count": n,
            "dynamic_points": n_dyn,
            "config": cfg.to_dict(),
            "inputs": {"trajectory": sha256_file(traj_path),
                       "scans": {p.name: sha256_file(p) for p in paths}},
            "files": label_hashes,
        }
        write_manifest(tmp / "manifest.json", manifest)
        summary = {
            "scan_count": n,
            "dynamic_points": n_dyn,
            "dynamic_fraction": n_dyn / n_valid if n_valid else 0.0,
            "wall_seconds": wall,
            "per_scan_mean_seconds": wall / n if n else 0.0,
            "throughput": stats.as_dict(),
            "pass1_throughput": measure_throughput(pass1).as_dict(),
            "pass2_throughput": measure_throughput(pass2).as_dict(),
        }
        (tmp / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        _write_timing_csv(tmp / "timing.csv", [p.stem for p in paths], per_scan)
        out_dir.mkdir(parents=True, exist_ok=True)
        for f in sorted(tmp.iterdir()):
            os.replace(f, out_dir / f.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return summary


def _write_timing_csv(path: Path, scan_ids, records) -> None:
    import csv

    from .evaluation import STAGES

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scan_id", *STAGES, "total"])
        for sid, rec in zip(scan_ids, records):
            vals = [rec.get(s, 0.0) for s in STAGES]
            w.writerow([sid, *(f"{v:.6f}" for v in vals), f"{sum(vals):.6f}"])


__all__ = ["SequenceConfig", "LabeledScan", "ScanDiagnostics", "PipelineError", "run_free_space_pass",
           "run_occupancy_pass", "iter_occupancy_pass", "label_scans", "label_sequence"]
