"""Ground and ceiling removal on the range image.

Column elevation angles select near-horizontal surface patches; a RANSAC
plane constrained to be near horizontal is fitted below the sensor (and
above it when there is enough material for a ceiling), and the inliers seed
a breadth-first growth over the image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import NoPlane

ELIGIBLE_ANGLE_DEG = 30.0
INLIER_DISTANCE = 0.25
MAX_TILT_DEG = 30.0
GROWTH_ANGLE_DEG = 10.0
RANSAC_ITERATIONS = 200
MIN_GROUND_INLIERS = 100
MIN_CEILING_POINTS = 500
# share of all points near a ceiling fit that must themselves look flat;
# range noise on far walls makes a few vertical pairs look horizontal, and a
# plane through those slices the walls instead of following a ceiling
MIN_CEILING_SUPPORT = 0.2


@dataclass(frozen=True, eq=False)
class SupportPlane:
    """Plane ``{p : normal . p == offset}`` with an upward unit normal."""

    normal: np.ndarray
    offset: float
    inlier_threshold: float = INLIER_DISTANCE
    inliers: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64), repr=False)
    kind: str = "ground"

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.abs(points @ self.normal - self.offset)


def compute_elevation_angles(scan) -> np.ndarray:
    """Per-pixel angle [deg] to the vertically adjacent points in the same column.

    With two valid vertical neighbours the flatter of the two angles is kept,
    so floor pixels bordering a wall row still read as floor.  Pixels without
    a valid vertical neighbour get 90.
    """
    xyz = scan.xyz
    valid = scan.valid
    d = xyz[1:] - xyz[:-1]
    pair = np.degrees(np.arctan2(np.abs(d[..., 2]), np.hypot(d[..., 0], d[..., 1])))
    pair = np.where(valid[1:] & valid[:-1], pair, 90.0)
    angle = np.full(valid.shape, 90.0)
    angle[:-1] = pair
    angle[1:] = np.minimum(angle[1:], pair)
    angle[~valid] = 90.0
    return angle


def _ransac(points: np.ndarray, rng: np.random.Generator, iterations: int, threshold: float,
            max_tilt_deg: float) -> tuple[np.ndarray, float, np.ndarray] | None:
    n = len(points)
    if n < 3:
        return None
    idx = np.stack([rng.choice(n, size=3, replace=False) for _ in range(iterations)])
    a, b, c = points[idx[:, 0]], points[idx[:, 1]], points[idx[:, 2]]
    normals = np.cross(b - a, c - a)
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 1e-12
    normals[ok] /= norms[ok, None]
    normals[normals[:, 2] < 0] *= -1
    cos_tilt = np.cos(np.radians(max_tilt_deg))
    ok &= normals[:, 2] >= cos_tilt
    if not ok.any():
        return None
    normals = normals[ok]
    offsets = np.einsum("ij,ij->i", normals, a[ok])
    counts = np.array([(np.abs(points @ nrm - off) <= threshold).sum() for nrm, off in zip(normals, offsets)])
    best = int(np.argmax(counts))
    normal, offset = normals[best], offsets[best]
    inl = np.abs(points @ normal - offset) <= threshold
    # least-squares refinement on the consensus set
    if inl.sum() >= 3:
        sub = points[inl]
        centroid = sub.mean(axis=0)
        _, _, vt = np.linalg.svd(sub - centroid, full_matrices=False)
        refined = vt[-1] if vt[-1, 2] >= 0 else -vt[-1]
        if refined[2] >= cos_tilt:
            normal, offset = refined, float(refined @ centroid)
            inl = np.abs(points @ normal - offset) <= threshold
    return normal, float(offset), inl


def fit_support_planes(scan, angles: np.ndarray, seed: int = 0, *,
                       eligible_angle: float = ELIGIBLE_ANGLE_DEG,
                       inlier_distance: float = INLIER_DISTANCE,
                       max_tilt: float = MAX_TILT_DEG,
                       iterations: int = RANSAC_ITERATIONS,
                       min_ground_inliers: int = MIN_GROUND_INLIERS,
                       min_ceiling_points: int = MIN_CEILING_POINTS,
                       min_ceiling_support: float = MIN_CEILING_SUPPORT) -> list[SupportPlane]:
    """Ground plane (and optional ceiling) from low-elevation-angle points.

    Works in the sensor frame; ``z < 0`` is below the sensor.  Raises
    :class:`NoPlane` when the ground fit has fewer than ``min_ground_inliers``.
    A ceiling is dropped when fewer than ``min_ceiling_support`` of the valid
    points within ``inlier_distance`` of it are eligible.
    """
    rng = np.random.default_rng(seed)
    xyz = scan.xyz.reshape(-1, 3)
    eligible = (scan.valid & (angles < eligible_angle)).ravel()
    planes = []
    for kind in ("ground", "ceiling"):
        side = xyz[:, 2] < 0 if kind == "ground" else xyz[:, 2] > 0
        cand = np.flatnonzero(eligible & side)
        if kind == "ceiling" and len(cand) < min_ceiling_points:
            break
        fit = _ransac(xyz[cand], rng, iterations, inlier_distance, max_tilt)
        n_inl = 0 if fit is None else int(fit[2].sum())
        if n_inl < min_ground_inliers:
            if kind == "ground":
                raise NoPlane(f"ground fit found {n_inl} inliers among {len(cand)} eligible points")
            break
        normal, offset, inl = fit
        if kind == "ceiling":
            near = scan.valid.ravel() & (np.abs(xyz @ normal - offset) <= inlier_distance)
            if eligible[near].mean() < min_ceiling_support:
                break
        planes.append(SupportPlane(normal, offset, inlier_distance, cand[inl], kind))
    return planes


@njit(cache=True)
def _grow(seeds, joinable, rows, cols):
    mask = np.zeros(rows * cols, np.bool_)
    queue = np.empty(rows * cols, np.int64)
    head = 0
    tail = 0
    for s in seeds:
        if not mask[s]:
            mask[s] = True
            queue[tail] = s
            tail += 1
    while head < tail:
        p = queue[head]
        head += 1
        r = p // cols
        c = p - r * cols
        for k in range(4):
            if k == 0:
                q = r * cols + (c + 1) % cols
            elif k == 1:
                q = r * cols + (c - 1 + cols) % cols
            elif k == 2:
                if r + 1 >= rows:
                    continue
                q = p + cols
            else:
                if r == 0:
                    continue
                q = p - cols
            if not mask[q] and joinable[q]:
                mask[q] = True
                queue[tail] = q
                tail += 1
    return mask


def grow_ground_mask(scan, planes: list[SupportPlane], angles: np.ndarray | None = None,
                     growth_angle: float = GROWTH_ANGLE_DEG, max_distance: float | None = None) -> np.ndarray:
    """Boolean ``(rows, cols)`` mask of ground/ceiling points.

    Breadth-first growth over the 4-connected range image (azimuth wraps)
    from the plane inliers; a neighbour joins when its column elevation angle
    is below ``growth_angle`` and it lies within ``max_distance`` (default
    twice the inlier threshold) of an accepted plane.  The distance gate keeps
    growth from stepping onto table tops and similar raised flat surfaces.
    """
    if not planes:
        return np.zeros(scan.valid.shape, bool)
    if angles is None:
        angles = compute_elevation_angles(scan)
    seeds = np.unique(np.concatenate([p.inliers for p in planes])).astype(np.int64)
    pts = scan.xyz.reshape(-1, 3)
    near = np.zeros(len(pts), bool)
    for p in planes:
        lim = 2.0 * p.inlier_threshold if max_distance is None else max_distance
        near |= p.distance(pts) <= lim
    joinable = scan.valid.ravel() & (angles.ravel() < growth_angle) & near
    mask = _grow(seeds, joinable, scan.rows, scan.cols)
    return mask.reshape(scan.valid.shape) & scan.valid


def segment_ground(scan, seed: int = 0, **params) -> tuple[np.ndarray, list[SupportPlane]]:
    """Angles, plane fit and growth in one call; empty mask when there is no ground."""
    growth_angle = params.pop("growth_angle", GROWTH_ANGLE_DEG)
    angles = compute_elevation_angles(scan)
    try:
        planes = fit_support_planes(scan, angles, seed, **params)
    except NoPlane:
        return np.zeros(scan.valid.shape, bool), []
    return grow_ground_mask(scan, planes, angles, growth_angle), planes
