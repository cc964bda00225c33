"""Small builders shared by the test modules."""

import numpy as np

from occlabel.scan import OrganizedScan, Trajectory
from occlabel.simulator import SceneSpec


def make_scan(xyz, valid=None, timestamp=None, intensity=None, frame_timestamp=0.0):
    """Sensor-frame scan from a ``(rows, cols, 3)`` array; ranges follow from xyz."""
    xyz = np.asarray(xyz, dtype=np.float64)
    shape = xyz.shape[:2]
    if valid is None:
        valid = np.ones(shape, bool)
    valid = np.asarray(valid, bool)
    xyz = np.where(valid[..., None], xyz, 0.0)
    rng = np.where(valid, np.linalg.norm(xyz, axis=-1), 0.0)
    if timestamp is None:
        timestamp = np.zeros(shape)
    if intensity is None:
        intensity = np.where(valid, 0.5, 0.0)
    return OrganizedScan(xyz=xyz, range=rng, intensity=np.asarray(intensity, float),
                         timestamp=np.broadcast_to(timestamp, shape).astype(np.float64).copy(),
                         valid=valid, frame_timestamp=frame_timestamp)


def from_ranges(ranges, directions, **kw):
    """Scan from per-pixel ranges along unit ``directions`` (inf or 0 = no return)."""
    r = np.asarray(ranges, dtype=np.float64)
    valid = np.isfinite(r) & (r > 0)
    xyz = directions * np.where(valid, r, 0.0)[..., None]
    return make_scan(xyz, valid, **kw)


def static_traj(t0=-1.0, t1=100.0, translation=(0.0, 0.0, 0.0)):
    return Trajectory(np.array([t0, t1]), np.array([translation, translation], float),
                      np.array([[0, 0, 0, 1.0], [0, 0, 0, 1.0]]))


def room_dict(rows=16, cols=256, duration=1.0, noise=0.0, movers=(), ceiling=True,
              sensor_z=1.2, seed=0, boxes=(), sensor_path=None, vfov=(-25.0, 25.0), floor=True):
    """A 12 x 10 m walled room scene description at reduced resolution."""
    planes = [{"normal": [0, 0, 1], "offset": 0.0}] if floor else []
    if ceiling:
        planes.append({"normal": [0, 0, -1], "offset": -3.0})
    walls = [
        {"min": [-6.3, -5.3, 0.0], "max": [6.3, -5.0, 3.0]},
        {"min": [-6.3, 5.0, 0.0], "max": [6.3, 5.3, 3.0]},
        {"min": [-6.3, -5.0, 0.0], "max": [-6.0, 5.0, 3.0]},
        {"min": [6.0, -5.0, 0.0], "max": [6.3, 5.0, 3.0]},
    ]
    path = sensor_path or {"waypoints": [[0.0, 0.0, sensor_z]], "speed": 0.0}
    return {
        "name": "test-room",
        "seed": seed,
        "duration": duration,
        "noise": noise,
        "sensor": {"rows": rows, "cols": cols, "vfov": list(vfov), "rate": 10.0,
                   "max_range": 60.0, "path": path},
        "static": {"planes": planes, "boxes": walls + list(boxes)},
        "movers": list(movers),
    }


def room(**kw):
    return SceneSpec.from_dict(room_dict(**kw))


# --------------------------------------------------------------------------- traversal oracles

def exact_traversal(o, e, vs):
    """Voxels the segment ``[o, e)`` overlaps, by slab clipping every voxel in its bounding box.

    Returns ``(voxels in entry order, gap, to_plane)``: ``gap`` is the
    shortest distance along the ray between two successive boundary-plane
    crossings and ``to_plane`` the distance from ``o`` or ``e`` to the nearest
    boundary plane.  Small values of either mean the ray grazes a voxel edge
    or corner, or starts or ends on a face, where the answer is a tie-break.
    """
    o = np.asarray(o, float)
    e = np.asarray(e, float)
    d = e - o
    length = np.linalg.norm(d)
    lo = np.floor(np.minimum(o, e) / vs).astype(int)
    hi = np.floor(np.maximum(o, e) / vs).astype(int)
    grid = np.stack(np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(lo, hi)], indexing="ij"), -1).reshape(-1, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (grid * vs - o) / d
        t1 = ((grid + 1) * vs - o) / d
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # axis with zero direction: inside the slab or not at all
    flat = d == 0
    inside = (o >= grid * vs) & (o < (grid + 1) * vs)
    tmin = np.where(flat, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(flat, np.where(inside, np.inf, -np.inf), tmax)
    enter = np.maximum(tmin.max(axis=1), 0.0)
    leave = np.minimum(tmax.min(axis=1), 1.0)
    keep = leave > enter
    end_voxel = np.floor(e / vs).astype(int)
    keep &= ~np.all(grid == end_voxel, axis=1)
    order = np.argsort(enter[keep], kind="stable")
    voxels = [tuple(int(v) for v in row) for row in grid[keep][order]]

    crossings = []
    for k in range(3):
        if d[k] == 0:
            continue
        planes = np.arange(lo[k], hi[k] + 2) * vs
        t = (planes - o[k]) / d[k]
        crossings.append(t[(t > 0) & (t < 1)])
    c = np.sort(np.concatenate(crossings)) * length if crossings else np.empty(0)
    gap = float(np.diff(c).min()) if len(c) > 1 else np.inf
    frac = np.concatenate([o / vs, e / vs])
    to_plane = float(np.min(np.abs(frac - np.round(frac))) * vs)
    return voxels, gap, to_plane


def sampled_traversal(o, e, vs, step):
    """Voxels hit by samples every ``step`` along ``[o, e)``, minus the endpoint voxel, in order."""
    o = np.asarray(o, float)
    e = np.asarray(e, float)
    length = np.linalg.norm(e - o)
    t = np.arange(0.0, length, step) / length
    idx = np.floor((o + t[:, None] * (e - o)) / vs).astype(np.int64)
    change = np.ones(len(idx), bool)
    change[1:] = np.any(idx[1:] != idx[:-1], axis=1)
    seq = [tuple(int(v) for v in row) for row in idx[change]]
    end = tuple(int(v) for v in np.floor(e / vs))
    return [v for v in seq if v != end]


def floor_truth(scene, scan):
    """Pixels whose return is the z=0 floor plane (static sensor, zero yaw, no noise)."""
    from occlabel.simulator import beam_directions

    d = beam_directions(scene.sensor)
    z0 = scene.sensor.path.position(0.0)[..., 2].item()
    with np.errstate(divide="ignore"):
        t = np.where(d[..., 2] < 0, -z0 / d[..., 2], np.inf)
    return scan.valid & (np.abs(scan.range - t) < 1e-4)
