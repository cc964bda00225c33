"""Synthetic organized LiDAR sequences with moving primitives and ground truth.

A spinning sensor casts ``rows x cols`` rays per revolution.  Every column
has its own timestamp; the sensor pose and all movers are evaluated at that
time, so motion distortion is physically present in the raw scans.  Ground
truth marks a point dynamic when its ray first hits a mover whose speed at
that instant exceeds :data:`MOVING_SPEED`.

Scenes are YAML documents; see ``presets/*.yaml`` and the README for the
schema.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .formats import LABEL_SUFFIX, SCAN_SUFFIX, labels_to_bytes, scan_to_bytes, sha256_file, write_manifest, \
    write_trajectory
from .scan import OrganizedScan, Trajectory

MOVING_SPEED = 1e-3
PRESETS = ("static-room", "movers-mixed", "stop-and-go", "crowd")
SHAPES = ("sphere", "box", "cylinder", "biped")

# biped proportions, as fractions of the overall height
_LEG_HEIGHT = 0.52
_LEG_RADIUS = 0.08
_HIP_HALF_WIDTH = 0.11
_TORSO_CENTER = 0.72
_TORSO_RADII = (0.2, 0.16, 0.36)
_STRIDE = 0.7


# --------------------------------------------------------------------------- paths

@dataclass
class Path3:
    """Piecewise-linear motion through waypoints at per-segment speeds.

    ``waits[i]`` pauses at waypoint ``i`` before leaving it.  ``mode`` is
    ``once`` (hold the last waypoint), ``cycle`` (return to the first
    waypoint and repeat) or ``pingpong``.  Waypoints may carry a fourth
    value (yaw in degrees), interpolated like the position.
    """

    waypoints: np.ndarray
    speeds: np.ndarray
    waits: np.ndarray
    mode: str = "once"
    key_t: np.ndarray = field(init=False, repr=False)
    key_p: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] not in (3, 4) or len(w) < 1:
            raise ValueError("waypoints must be a list of [x, y, z] or [x, y, z, yaw]")
        if self.mode not in ("once", "cycle", "pingpong"):
            raise ValueError(f"unknown path mode {self.mode!r}")
        if self.mode == "cycle" and len(w) > 1:
            w = np.vstack([w, w[:1]])
        elif self.mode == "pingpong" and len(w) > 1:
            w = np.vstack([w, w[-2::-1]])
        n_seg = len(w) - 1
        sp = np.atleast_1d(np.asarray(self.speeds, dtype=np.float64))
        if sp.size == 1:
            speeds = np.full(n_seg, sp[0])
        elif self.mode == "pingpong" and sp.size == len(self.waypoints) - 1:
            speeds = np.concatenate([sp, sp[::-1]])
        elif sp.size == n_seg:
            speeds = sp
        else:
            raise ValueError(f"expected 1 or {n_seg} speeds, got {sp.size}")
        waits = np.zeros(len(w))
        given = np.asarray(self.waits, dtype=np.float64).ravel()
        waits[:min(len(given), len(w))] = given[:len(w)]
        if np.any(speeds < 0) or np.any(waits < 0):
            raise ValueError("speeds and waits must be non-negative")
        times, points = [0.0], [w[0]]
        t = 0.0
        for i in range(n_seg):
            if waits[i] > 0:
                t += waits[i]
                times.append(t)
                points.append(w[i])
            dist = float(np.linalg.norm(w[i + 1, :3] - w[i, :3]))
            if dist == 0.0 and w.shape[1] == 4:
                dist = abs(w[i + 1, 3] - w[i, 3]) * math.pi / 180.0
            if dist == 0.0:
                continue
            if speeds[i] <= 0:
                raise ValueError("a segment with nonzero length needs a positive speed")
            t += dist / speeds[i]
            times.append(t)
            points.append(w[i + 1])
        if self.mode == "once" and waits[-1] > 0:
            t += waits[-1]
            times.append(t)
            points.append(w[-1])
        self.key_t = np.array(times)
        self.key_p = np.array(points)

    @classmethod
    def from_dict(cls, d: dict) -> Path3:
        wp = d["waypoints"]
        speed = d.get("speeds", d.get("speed", 1.0))
        return cls(np.array(wp, dtype=np.float64), np.atleast_1d(np.array(speed, dtype=np.float64)),
                   np.array(d.get("waits", [0.0]), dtype=np.float64), d.get("mode", "once"))

    @property
    def period(self) -> float:
        return float(self.key_t[-1])

    def _local_time(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.period == 0.0:
            return np.zeros_like(t)
        if self.mode == "once":
            return np.clip(t, 0.0, self.period)
        return np.mod(t, self.period)

    def position(self, t) -> np.ndarray:
        """Waypoint-space position (3 or 4 columns) at times ``t``."""
        lt = self._local_time(t)
        return np.stack([np.interp(lt, self.key_t, self.key_p[:, k]) for k in range(self.key_p.shape[1])], axis=-1)

    def speed(self, t) -> np.ndarray:
        """Translational speed of the segment active at ``t`` (0 while waiting)."""
        t = np.asarray(t, dtype=np.float64)
        if len(self.key_t) < 2:
            return np.zeros_like(t)
        lt = self._local_time(t)
        seg = np.clip(np.searchsorted(self.key_t, lt, side="right") - 1, 0, len(self.key_t) - 2)
        dt = self.key_t[seg + 1] - self.key_t[seg]
        dp = np.linalg.norm(self.key_p[seg + 1, :3] - self.key_p[seg, :3], axis=-1)
        v = np.where(dt > 0, dp / np.where(dt > 0, dt, 1.0), 0.0)
        if self.mode == "once":
            v = np.where((t < 0) | (t >= self.period), 0.0, v)
        return v

    def heading(self, t) -> np.ndarray:
        """Unit horizontal direction of travel (x axis while stationary)."""
        lt = self._local_time(t)
        seg = np.clip(np.searchsorted(self.key_t, lt, side="right") - 1, 0, max(len(self.key_t) - 2, 0))
        if len(self.key_t) < 2:
            d = np.zeros((np.size(lt), 2))
        else:
            d = self.key_p[seg + 1, :2] - self.key_p[seg, :2]
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return np.where(n > 0, d / np.where(n > 0, n, 1.0), np.array([1.0, 0.0]))


# --------------------------------------------------------------------------- scene

@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    intensity: float = 0.5


@dataclass
class Plane:
    normal: np.ndarray
    offset: float
    intensity: float = 0.3


@dataclass
class Mover:
    shape: str
    size: np.ndarray
    path: Path3
    intensity: float = 0.8
    name: str = ""


@dataclass
class SensorSpec:
    rows: int = 64
    cols: int = 2048
    vfov: tuple[float, float] = (-16.6, 16.6)
    rate: float = 10.0
    max_range: float = 80.0
    path: Path3 | None = None


@dataclass
class SceneSpec:
    name: str
    sensor: SensorSpec
    duration: float
    planes: list[Plane] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)
    movers: list[Mover] = field(default_factory=list)
    noise: float = 0.0
    seed: int = 0
    source: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        s = self.sensor
        if s.rate <= 0:
            raise ValueError("sensor rate must be positive")
        if s.rows < 2 or s.cols < 8:
            raise ValueError("sensor needs rows >= 2 and cols >= 8")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.noise < 0:
            raise ValueError("noise sigma must be non-negative")
        for m in self.movers:
            if m.shape not in SHAPES:
                raise ValueError(f"unknown mover shape {m.shape!r}")

    @property
    def n_scans(self) -> int:
        return int(round(self.duration * self.sensor.rate))

    def scan_times(self) -> np.ndarray:
        return np.arange(self.n_scans) / self.sensor.rate

    def scene_hash(self) -> str:
        blob = json.dumps(self.source, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        sd = d.get("sensor", {})
        sensor = SensorSpec(
            rows=int(sd.get("rows", 64)), cols=int(sd.get("cols", 2048)),
            vfov=tuple(float(v) for v in sd.get("vfov", (-16.6, 16.6))),
            rate=float(sd.get("rate", 10.0)), max_range=float(sd.get("max_range", 80.0)),
            path=Path3.from_dict(sd["path"]) if "path" in sd else Path3(np.zeros((1, 3)), np.zeros(1), np.zeros(1)),
        )
        static = d.get("static", {})
        planes = [Plane(np.asarray(p["normal"], dtype=np.float64) / np.linalg.norm(p["normal"]),
                        float(p["offset"]), float(p.get("intensity", 0.3))) for p in static.get("planes", [])]
        boxes = [Box(np.asarray(b["min"], dtype=np.float64), np.asarray(b["max"], dtype=np.float64),
                     float(b.get("intensity", 0.5))) for b in static.get("boxes", [])]
        movers = [Mover(m["shape"], np.atleast_1d(np.asarray(m["size"], dtype=np.float64)),
                        Path3.from_dict(m["path"]), float(m.get("intensity", 0.8)), m.get("name", f"mover{i}"))
                  for i, m in enumerate(d.get("movers", []))]
        return cls(name=d.get("name", "scene"), sensor=sensor, duration=float(d["duration"]),
                   planes=planes, boxes=boxes, movers=movers, noise=float(d.get("noise", 0.0)),
                   seed=int(d.get("seed", 0)), source=d)

    @classmethod
    def load(cls, path) -> SceneSpec:
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def with_seed(self, seed: int) -> SceneSpec:
        d = dict(self.source)
        d["seed"] = int(seed)
        return SceneSpec.from_dict(d)


def load_preset(name: str) -> SceneSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = (resources.files("occlabel") / "presets" / f"{name}.yaml").read_text()
    return SceneSpec.from_dict(yaml.safe_load(text))


def load_scene(ref: str) -> SceneSpec:
    """A preset name or a path to a scene file."""
    if ref in PRESETS:
        return load_preset(ref)
    return SceneSpec.load(ref)


# --------------------------------------------------------------------------- sensor motion

def _yaw_quat(yaw: np.ndarray) -> np.ndarray:
    h = 0.5 * np.asarray(yaw)
    return np.stack([np.zeros_like(h), np.zeros_like(h), np.sin(h), np.cos(h)], axis=-1)


def sensor_pose(scene: SceneSpec, t) -> tuple[np.ndarray, np.ndarray]:
    """Sensor position ``(n, 3)`` and yaw ``(n,)`` in radians at times ``t``."""
    p = scene.sensor.path.position(np.atleast_1d(t))
    yaw = np.deg2rad(p[:, 3]) if p.shape[1] == 4 else np.zeros(len(p))
    return p[:, :3], yaw


def sensor_trajectory(scene: SceneSpec, sample_rate: float = 100.0) -> Trajectory:
    """Exact trajectory: path keyframes plus regular samples over the sequence.

    Position and yaw are linear between keyframes, so interpolating these
    poses reproduces the rendering poses exactly.
    """
    end = scene.duration + 1.0 / scene.sensor.rate
    ts = np.arange(0.0, end + 1e-12, 1.0 / sample_rate)
    path = scene.sensor.path
    if path.period > 0:
        if path.mode == "once":
            keys = path.key_t
        else:
            reps = np.arange(0, int(end // path.period) + 1)
            keys = (reps[:, None] * path.period + path.key_t[None, :]).ravel()
        ts = np.concatenate([ts, keys[(keys > 0) & (keys < end)], [end]])
    ts = np.unique(np.round(ts, 12))
    pos, yaw = sensor_pose(scene, ts)
    return Trajectory(ts, pos, _yaw_quat(yaw))


# --------------------------------------------------------------------------- ray casting

def _hit_plane(o, d, normal, offset):
    denom = d @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (offset - o @ normal) / denom
    return np.where(np.abs(denom) > 1e-12, t, np.inf)


def _hit_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def _hit_ellipsoid(o, d, center, radii):
    oc = (o - center) / radii
    dd = d / radii
    a = np.einsum("...k,...k", dd, dd)
    b = 2 * np.einsum("...k,...k", oc, dd)
    c = np.einsum("...k,...k", oc, oc) - 1.0
    disc = b * b - 4 * a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    return np.where((disc >= 0) & (t0 > 0), t0, np.inf)


def _hit_cylinder(o, d, base, radius, height):
    """Vertical capped cylinder standing on ``base``."""
    ox = o[..., 0] - base[..., 0]
    oy = o[..., 1] - base[..., 1]
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - 4 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2 * a)
    z = o[..., 2] + t_side * dz
    side_ok = (disc >= 0) & (a > 1e-12) & (t_side > 0) & (z >= base[..., 2]) & (z <= base[..., 2] + height)
    best = np.where(side_ok, t_side, np.inf)
    for zc in (base[..., 2], base[..., 2] + height):
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (zc - o[..., 2]) / dz
        px = ox + tc * dx
        py = oy + tc * dy
        cap_ok = (np.abs(dz) > 1e-12) & (tc > 0) & (px * px + py * py <= radius * radius)
        best = np.minimum(best, np.where(cap_ok, tc, np.inf))
    return best


def _mover_parts(m: Mover, t_cols: np.ndarray):
    """Primitive intersection callables for one mover at column times."""
    pos = m.path.position(t_cols)[None, :, :3]  # (1, cols, 3), broadcast over rows
    if m.shape == "sphere":
        r = float(m.size[0])
        return [lambda o, d: _hit_ellipsoid(o, d, pos, np.array([r, r, r]))]
    if m.shape == "box":
        half = np.broadcast_to(m.size, (3,)) / 2.0
        return [lambda o, d: _hit_box(o, d, pos - half, pos + half)]
    if m.shape == "cylinder":
        radius, height = float(m.size[0]), float(m.size[1])
        return [lambda o, d: _hit_cylinder(o, d, pos, radius, height)]
    # biped: two swinging legs under an ellipsoid torso; position is between the feet
    h = float(m.size[0])
    scale = h / 1.75
    heading = m.path.heading(t_cols)
    side = np.stack([-heading[:, 1], heading[:, 0]], axis=-1)
    # gait phase follows distance walked, so the legs freeze when the mover stops
    phase = 2 * np.pi * _walked_distance(m.path, t_cols) / _STRIDE
    swing = 0.15 * scale * np.sin(phase)
    parts = []
    for sgn in (1.0, -1.0):
        off = np.zeros((len(t_cols), 3))
        off[:, :2] = sgn * (_HIP_HALF_WIDTH * scale * side + swing[:, None] * heading)
        leg_base = pos + off[None, :, :]
        parts.append(lambda o, d, b=leg_base: _hit_cylinder(o, d, b, _LEG_RADIUS * scale, _LEG_HEIGHT * h))
    torso_c = pos + np.array([0.0, 0.0, _TORSO_CENTER * h])
    radii = np.array(_TORSO_RADII) * scale
    parts.append(lambda o, d: _hit_ellipsoid(o, d, torso_c, radii))
    return parts


def _walked_distance(path: Path3, t: np.ndarray) -> np.ndarray:
    """Arc length travelled along the path up to each time (monotone)."""
    lt = np.asarray(t, dtype=np.float64)
    seg_len = np.linalg.norm(np.diff(path.key_p[:, :3], axis=0), axis=-1) if len(path.key_t) > 1 else np.zeros(0)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    if path.period == 0:
        return np.zeros_like(lt)
    if path.mode == "once":
        return np.interp(np.clip(lt, 0, path.period), path.key_t, cum)
    laps = np.floor(lt / path.period)
    return laps * cum[-1] + np.interp(np.mod(lt, path.period), path.key_t, cum)


def beam_directions(sensor: SensorSpec) -> np.ndarray:
    """Unit ray directions in the sensor frame, shape ``(rows, cols, 3)``."""
    lo, hi = sensor.vfov
    elev = np.deg2rad(np.linspace(hi, lo, sensor.rows))
    az = 2 * np.pi * np.arange(sensor.cols) / sensor.cols
    ce = np.cos(elev)[:, None]
    return np.stack([ce * np.cos(az)[None, :], ce * np.sin(az)[None, :],
                     np.broadcast_to(np.sin(elev)[:, None], (sensor.rows, sensor.cols))], axis=-1)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Per-point truth for one scan.

    ``labels`` follows the motion rule (1 = hit a mover that is moving).
    ``instance`` is the hit object: 0 for static geometry or no hit, ``k + 1``
    for mover ``k`` regardless of its speed.
    """

    labels: np.ndarray
    instance: np.ndarray


def render_scan(scene: SceneSpec, t: float, scan_index: int | None = None,
                noise: float | None = None) -> tuple[OrganizedScan, GroundTruth]:
    """Ray-cast one revolution starting at time ``t``."""
    if not 0.0 <= t <= scene.duration:
        raise ValueError(f"render time {t} outside [0, {scene.duration}]")
    s = scene.sensor
    sigma = scene.noise if noise is None else noise
    t_cols = t + np.arange(s.cols) / (s.cols * s.rate)
    pos, yaw = sensor_pose(scene, t_cols)
    d_sensor = beam_directions(s)
    cy, sy = np.cos(yaw), np.sin(yaw)
    d = np.empty_like(d_sensor)
    d[..., 0] = cy[None, :] * d_sensor[..., 0] - sy[None, :] * d_sensor[..., 1]
    d[..., 1] = sy[None, :] * d_sensor[..., 0] + cy[None, :] * d_sensor[..., 1]
    d[..., 2] = d_sensor[..., 2]
    o = np.broadcast_to(pos[None, :, :], d.shape)

    best = np.full(d.shape[:2], np.inf)
    owner = np.zeros(d.shape[:2], np.int64)  # 0 static, k+1 mover k
    intensity = np.zeros(d.shape[:2])
    for p in scene.planes:
        th = _hit_plane(o, d, p.normal, p.offset)
        th = np.where(th > 1e-9, th, np.inf)
        closer = th < best
        best = np.where(closer, th, best)
        intensity = np.where(closer, p.intensity, intensity)
    for b in scene.boxes:
        th = _hit_box(o, d, b.lo, b.hi)
        closer = th < best
        best = np.where(closer, th, best)
        intensity = np.where(closer, b.intensity, intensity)
    for k, m in enumerate(scene.movers):
        for part in _mover_parts(m, t_cols):
            th = part(o, d)
            closer = th < best
            best = np.where(closer, th, best)
            owner = np.where(closer, k + 1, owner)
            intensity = np.where(closer, m.intensity, intensity)

    valid = best <= s.max_range
    rng_true = np.where(valid, best, 0.0)
    if sigma > 0:
        seed = [scene.seed, scan_index if scan_index is not None else int(round(t * 1e6))]
        noise_draw = np.random.default_rng(seed).normal(0.0, sigma, size=rng_true.shape)
        rng = np.where(valid, rng_true + noise_draw, 0.0)
        valid &= rng > 0
        rng = np.where(valid, rng, 0.0)
    else:
        rng = rng_true
    xyz = (d_sensor * rng[..., None]).astype(np.float32)
    rng32 = np.where(valid, np.linalg.norm(xyz.astype(np.float64), axis=-1), 0.0).astype(np.float32)
    owner = np.where(valid, owner, 0)
    speeds = np.zeros((len(scene.movers) + 1, s.cols))
    for k, m in enumerate(scene.movers):
        speeds[k + 1] = m.path.speed(t_cols)
    moving = speeds[owner, np.arange(s.cols)[None, :]] > MOVING_SPEED
    labels = np.where(valid & (owner > 0) & moving, 1, 0).astype(np.uint32)
    scan = OrganizedScan(
        xyz=xyz.astype(np.float64),
        range=rng32.astype(np.float64),
        intensity=np.where(valid, intensity, 0.0).astype(np.float32).astype(np.float64),
        timestamp=np.broadcast_to(t_cols[None, :], d.shape[:2]).copy(),
        valid=valid,
        frame_timestamp=float(t),
    )
    return scan, GroundTruth(labels, owner.astype(np.uint32))


def static_ranges(scene: SceneSpec, t: float) -> np.ndarray:
    """Noise-free ranges against the static geometry alone (inf = miss)."""
    movers = scene.movers
    try:
        scene.movers = []
        scan, _ = render_scan(scene, t, noise=0.0)
    finally:
        scene.movers = movers
    return np.where(scan.valid, scan.range, np.inf)


# --------------------------------------------------------------------------- sequences

def scan_name(i: int) -> str:
    return f"{i:06d}"


def generate_sequence(scene: SceneSpec, out_dir, seed: int | None = None) -> dict:
    """Write scans, trajectory, ground-truth labels and a manifest under ``out_dir``.

    Layout::

        scans/000000.bin ...          organized scans (sensor frame)
        ground_truth/000000.label ... motion ground truth
        instances/000000.label ...    hit-object ids (u32, 0 = static)
        trajectory.txt                exact sensor poses (TUM)
        manifest.json
    """
    if seed is not None:
        scene = scene.with_seed(seed)
    out = Path(out_dir)
    for sub in ("scans", "ground_truth", "instances"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    traj = sensor_trajectory(scene)
    write_trajectory(traj, out / "trajectory.txt")
    n_dyn = 0
    for i, t in enumerate(scene.scan_times()):
        scan, gt = render_scan(scene, float(t), scan_index=i)
        name = scan_name(i)
        (out / "scans" / (name + SCAN_SUFFIX)).write_bytes(scan_to_bytes(scan))
        (out / "ground_truth" / (name + LABEL_SUFFIX)).write_bytes(labels_to_bytes(gt.labels))
        (out / "instances" / (name + LABEL_SUFFIX)).write_bytes(gt.instance.astype("<u4").tobytes())
        n_dyn += int(gt.labels.sum())
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(out).as_posix()] = sha256_file(p)
    manifest = {
        "kind": "simulated-sequence",
        "sequence_id": scene.name,
        "scene_hash": scene.scene_hash(),
        "seed": scene.seed,
        "format_version": 1,
        "scan_count": scene.n_scans,
        "rows": scene.sensor.rows,
        "cols": scene.sensor.cols,
        "dynamic_points": n_dyn,
        "scene": scene.source,
        "files": files,
    }
    write_manifest(out / "manifest.json", manifest)
    return manifest
