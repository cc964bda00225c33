"""Organized scans, poses, trajectories and egomotion undistortion.

An organized scan is stored as a set of parallel ``(rows, cols)`` arrays
rather than an array of records, which is what every downstream numeric
routine wants anyway.  Row 0 is the top beam; columns follow the azimuth
sweep, so per-point timestamps increase along a row.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .errors import OutOfRange

QUAT_NORM_TOL = 1e-9
RANGE_NORM_TOL = 1e-4


class PointRecord(NamedTuple):
    x: float
    y: float
    z: float
    range: float
    intensity: float
    timestamp: float
    valid: bool


@dataclass(frozen=True, eq=False)
class OrganizedScan:
    """A ``rows x cols`` range image of LiDAR returns.

    ``frame`` is ``"sensor"`` for raw scans and ``"world"`` after
    :func:`undistort`.  World-frame scans keep the sensor-frame ``range``
    values and carry the per-point sensor position in ``origin``.
    """

    xyz: np.ndarray
    range: np.ndarray
    intensity: np.ndarray
    timestamp: np.ndarray
    valid: np.ndarray
    frame_timestamp: float = 0.0
    frame: str = "sensor"
    origin: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        shape = self.range.shape
        if len(shape) != 2:
            raise ValueError(f"range must be 2-D (rows, cols), got shape {shape}")
        if self.xyz.shape != shape + (3,):
            raise ValueError(f"xyz shape {self.xyz.shape} does not match {shape + (3,)}")
        for name in ("intensity", "timestamp", "valid"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} shape {getattr(self, name).shape} != {shape}")
        if self.valid.dtype != bool:
            raise ValueError("valid must be a boolean array")
        if self.frame not in ("sensor", "world"):
            raise ValueError(f"unknown frame {self.frame!r}")
        if self.origin is not None and self.origin.shape != shape + (3,):
            raise ValueError("origin must have the same layout as xyz")

    @property
    def rows(self) -> int:
        return self.range.shape[0]

    @property
    def cols(self) -> int:
        return self.range.shape[1]

    @property
    def n_points(self) -> int:
        return self.range.size

    def point(self, row: int, col: int) -> PointRecord:
        x, y, z = (float(v) for v in self.xyz[row, col])
        return PointRecord(x, y, z, float(self.range[row, col]), float(self.intensity[row, col]),
                           float(self.timestamp[row, col]), bool(self.valid[row, col]))

    def check_invariants(self) -> None:
        """Raise ``ValueError`` if the scan violates the record invariants."""
        v = self.valid
        if np.any(self.range[~v] != 0):
            raise ValueError("invalid points must carry range 0")
        if np.any(self.range[v] <= 0):
            raise ValueError("valid points must have positive range")
        if self.frame == "sensor":
            norm = np.linalg.norm(self.xyz[v].astype(np.float64), axis=-1)
            worst = np.max(np.abs(norm - self.range[v]), initial=0.0)
            if worst > RANGE_NORM_TOL:
                raise ValueError(f"range differs from |xyz| by {worst:.3g} m")
        if np.any(np.diff(self.timestamp, axis=1) < 0):
            raise ValueError("timestamps must be non-decreasing along each row")


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid sensor-to-world transform at one instant.

    ``rotation`` is a unit quaternion in ``(x, y, z, w)`` order (TUM layout).
    """

    timestamp: float
    translation: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > QUAT_NORM_TOL:
            raise ValueError(f"quaternion norm {np.linalg.norm(q)!r} is not 1")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)

    @classmethod
    def identity(cls, timestamp: float = 0.0) -> Pose:
        return cls(timestamp, np.zeros(3), np.array([0.0, 0.0, 0.0, 1.0]))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = Rotation.from_quat(self.rotation).as_matrix()
        m[:3, 3] = self.translation
        return m

    def transform(self, points: np.ndarray) -> np.ndarray:
        return Rotation.from_quat(self.rotation).apply(points) + self.translation


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-sorted poses; stored column-wise for vectorized interpolation."""

    timestamps: np.ndarray
    translations: np.ndarray
    rotations: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        tr = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        q = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        if ts.ndim != 1 or len(ts) < 2:
            raise ValueError("a trajectory needs at least 2 poses")
        if len(tr) != len(ts) or len(q) != len(ts):
            raise ValueError("timestamps, translations and rotations differ in length")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        norms = np.linalg.norm(q, axis=1)
        if np.any(np.abs(norms - 1.0) > QUAT_NORM_TOL):
            raise ValueError("trajectory quaternions must be unit length")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "translations", tr)
        object.__setattr__(self, "rotations", q)

    @classmethod
    def from_poses(cls, poses) -> Trajectory:
        poses = list(poses)
        return cls(np.array([p.timestamp for p in poses]),
                   np.array([p.translation for p in poses]),
                   np.array([p.rotation for p in poses]))

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def poses(self) -> list[Pose]:
        return [self.pose(i) for i in range(len(self))]

    def pose(self, i: int) -> Pose:
        return Pose(float(self.timestamps[i]), self.translations[i].copy(), self.rotations[i].copy())

    @property
    def start(self) -> float:
        return float(self.timestamps[0])

    @property
    def end(self) -> float:
        return float(self.timestamps[-1])

    @cached_property
    def _slerp(self) -> Slerp:
        return Slerp(self.timestamps, Rotation.from_quat(self.rotations))

    def check_span(self, t) -> None:
        t = np.asarray(t, dtype=np.float64)
        if t.size == 0:
            return
        lo, hi = float(t.min()), float(t.max())
        if lo < self.start or hi > self.end:
            bad = lo if lo < self.start else hi
            raise OutOfRange(f"time {bad!r} outside trajectory span [{self.start!r}, {self.end!r}]")

    def interpolate(self, t) -> tuple[Rotation, np.ndarray]:
        """Interpolated rotations and translations at times ``t`` (array)."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        self.check_span(t)
        rot = self._slerp(t)
        trans = np.stack([np.interp(t, self.timestamps, self.translations[:, k]) for k in range(3)], axis=-1)
        return rot, trans

    def compose_left(self, pose: Pose) -> Trajectory:
        """Trajectory whose every pose is ``pose * p`` (pre-composition by a fixed transform)."""
        r = Rotation.from_quat(pose.rotation)
        rot = r * Rotation.from_quat(self.rotations)
        return Trajectory(self.timestamps.copy(), r.apply(self.translations) + pose.translation,
                          _canonical(rot.as_quat()))


def _canonical(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return q


def interpolate_pose(traj: Trajectory, t: float) -> Pose:
    """Pose at time ``t``: linear translation, spherical rotation interpolation.

    Returns the stored pose unchanged when ``t`` equals one of its timestamps.
    """
    t = float(t)
    traj.check_span(t)
    k = int(np.searchsorted(traj.timestamps, t))
    if k < len(traj) and traj.timestamps[k] == t:
        return traj.pose(k)
    rot, trans = traj.interpolate(t)
    return Pose(t, trans[0], _canonical(rot.as_quat()[0]))


def undistort(scan: OrganizedScan, traj: Trajectory) -> OrganizedScan:
    """Reproject every valid point with the pose interpolated at its own timestamp.

    The result is in the world frame.  Sensor-frame ranges are kept (the
    discontinuity test works on them) and ``origin`` holds the world position
    of the sensor at each point's capture time.  Invalid points are untouched.
    """
    if scan.frame != "sensor":
        raise ValueError("undistort expects a sensor-frame scan")
    valid = scan.valid
    ts = scan.timestamp[valid]
    traj.check_span(ts)
    xyz = scan.xyz.astype(np.float64, copy=True)
    origin = np.zeros_like(xyz)
    if ts.size:
        # points of one column share a timestamp; interpolate once per unique time
        uniq, inverse = np.unique(ts, return_inverse=True)
        rot, trans = traj.interpolate(uniq)
        mats = rot.as_matrix()
        pts = xyz[valid]
        world = np.einsum("nij,nj->ni", mats[inverse], pts) + trans[inverse]
        xyz[valid] = world
        origin[valid] = trans[inverse]
    return replace(scan, xyz=xyz, frame="world", origin=origin)


def infer_column_timestamps(rows: int, cols: int, frame_timestamp: float, rate_hz: float) -> np.ndarray:
    """Per-point timestamps spread linearly over one revolution.

    For recordings that do not store per-point times.
    """
    col_t = frame_timestamp + np.arange(cols, dtype=np.float64) / (cols * rate_hz)
    return np.broadcast_to(col_t, (rows, cols)).copy()
