"""Two-stage clustering of candidate points and candidate-ratio validation.

Stage 1 groups candidate points by euclidean connectivity into seeds.
Stage 2 grows each seed over the full range image with the angle criterion
of range-image segmentation, so whole objects are recovered even where only
part of them produced candidates.  Validation keeps a cluster when it is
large enough and mostly made of candidate points.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from numba import njit
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, QhullError, cKDTree

SEED_RADIUS_FACTOR = 2.0
MIN_SEED_DIAMETER = 0.2
BETA_DEG = 10.0
RATIO_THRESHOLD = 0.6
MIN_CLUSTER_POINTS = 5
EXACT_DIAMETER_LIMIT = 5000


class Verdict(enum.Enum):
    PENDING = "pending"
    ACCEPTED = "accepted"
    REJECTED_RATIO = "rejected_ratio"
    REJECTED_SIZE = "rejected_size"


@dataclass(frozen=True, eq=False)
class CandidatePointSet:
    """Flat (row-major) indices of candidate points of one scan."""

    scan_id: str
    indices: np.ndarray

    def __len__(self):
        return len(self.indices)

    def mask(self, rows: int, cols: int) -> np.ndarray:
        m = np.zeros(rows * cols, bool)
        m[self.indices] = True
        return m.reshape(rows, cols)


@dataclass(frozen=True, eq=False)
class Cluster:
    point_indices: np.ndarray
    candidate_count: int
    diameter: float
    verdict: Verdict = Verdict.PENDING
    seed_indices: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64), repr=False)

    def __post_init__(self):
        if self.candidate_count > len(self.point_indices):
            raise ValueError("candidate_count exceeds cluster size")
        if self.diameter < 0:
            raise ValueError("negative diameter")

    @property
    def size(self) -> int:
        return len(self.point_indices)

    @property
    def ratio(self) -> float:
        return self.candidate_count / self.size if self.size else 0.0


def diameter(points: np.ndarray, exact_limit: int = EXACT_DIAMETER_LIMIT) -> float:
    """Largest pairwise distance; bounding-box diagonal above ``exact_limit`` points.

    The exact value is taken over convex-hull vertices when the hull exists,
    otherwise over all pairs in row chunks.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n < 2:
        return 0.0
    if n > exact_limit:
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    if n > 16:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except (QhullError, ValueError):
            pass  # flat or degenerate: fall through to brute force
    best = 0.0
    step = 512
    for i in range(0, len(pts), step):
        d = np.linalg.norm(pts[i:i + step, None, :] - pts[None, :, :], axis=-1)
        best = max(best, float(d.max()))
    return best


def cluster_candidates_stage1(points: CandidatePointSet | np.ndarray, scan, voxel_size: float,
                              radius_factor: float = SEED_RADIUS_FACTOR,
                              min_diameter: float = MIN_SEED_DIAMETER,
                              xyz: np.ndarray | None = None) -> list[np.ndarray]:
    """Seed clusters: connected components under distance <= radius_factor * voxel_size.

    Components whose diameter does not exceed ``min_diameter`` are dropped.
    ``xyz`` overrides the scan coordinates (e.g. undistorted world points).
    Returns sorted flat index arrays ordered by their smallest index.
    """
    idx = np.asarray(getattr(points, "indices", points), dtype=np.int64)
    if idx.size == 0:
        return []
    pts = (scan.xyz if xyz is None else xyz).reshape(-1, 3)[idx]
    tree = cKDTree(pts)
    pairs = tree.query_pairs(radius_factor * voxel_size, output_type="ndarray")
    n = len(idx)
    graph = coo_matrix((np.ones(len(pairs), np.int8), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    n_comp, comp = connected_components(graph, directed=False)
    order = np.argsort(comp, kind="stable")
    bounds = np.flatnonzero(np.diff(comp[order])) + 1
    seeds = []
    for members in np.split(order, bounds):
        if diameter(pts[members]) > min_diameter:
            seeds.append(np.sort(idx[members]))
    seeds.sort(key=lambda s: s[0])
    return seeds


@njit(cache=True)
def _grow_clusters(seed_idx, xyz, rng, valid, ground, rows, cols, beta_thr):
    n = rows * cols
    label = np.full(n, -1, np.int64)
    queue = np.empty(n, np.int64)
    n_clusters = 0
    for s_i in range(len(seed_idx)):
        s = seed_idx[s_i]
        if label[s] >= 0 or not valid[s]:
            continue
        cid = n_clusters
        n_clusters += 1
        label[s] = cid
        head = 0
        tail = 1
        queue[0] = s
        while head < tail:
            p = queue[head]
            head += 1
            r = p // cols
            c = p - r * cols
            rp = rng[p]
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
                if label[q] >= 0 or not valid[q]:
                    continue
                rq = rng[q]
                # angle between the two beams
                cosd = (xyz[p, 0] * xyz[q, 0] + xyz[p, 1] * xyz[q, 1] + xyz[p, 2] * xyz[q, 2]) / (rp * rq)
                cosd = min(1.0, max(-1.0, cosd))
                sind = np.sqrt(1.0 - cosd * cosd)
                d1 = max(rp, rq)
                d2 = min(rp, rq)
                if np.arctan2(d2 * sind, d1 - d2 * cosd) > beta_thr:
                    label[q] = cid
                    if not ground[q]:
                        queue[tail] = q
                        tail += 1
    return label, n_clusters


def grow_clusters_stage2(seeds: list[np.ndarray], scan, ground: np.ndarray | None,
                         candidate_mask: np.ndarray | None = None, beta_deg: float = BETA_DEG,
                         xyz_world: np.ndarray | None = None) -> list[Cluster]:
    """Range-image region growing from seed points.

    A 4-neighbour (azimuth wraps, rows do not) joins when
    ``beta = atan2(r_near sin(dpsi), r_far - r_near cos(dpsi))`` exceeds
    ``beta_deg``, with ``dpsi`` the angle between the two beams.  Ground
    points can be absorbed but do not expand further; invalid pixels stop
    growth.  Seeds reached by one growth share a cluster.

    ``scan`` must be in the sensor frame.  Diameters are measured on
    ``xyz_world`` when given, else on the scan coordinates.
    """
    rows, cols = scan.valid.shape
    if not seeds:
        return []
    seed_idx = np.concatenate(seeds).astype(np.int64)
    seed_idx = np.unique(seed_idx)
    gmask = np.zeros(rows * cols, bool) if ground is None else np.asarray(ground).ravel()
    xyz = np.ascontiguousarray(scan.xyz.reshape(-1, 3))
    label, _ = _grow_clusters(seed_idx, xyz, scan.range.ravel(), scan.valid.ravel(),
                              gmask, rows, cols, np.radians(beta_deg))
    cand = np.zeros(rows * cols, bool) if candidate_mask is None else np.asarray(candidate_mask).ravel()
    pts_all = (scan.xyz if xyz_world is None else xyz_world).reshape(-1, 3)
    members = np.flatnonzero(label >= 0)
    lab = label[members]
    order = np.argsort(lab, kind="stable")
    members, lab = members[order], lab[order]
    bounds = np.flatnonzero(np.diff(lab)) + 1
    seed_lab = label[seed_idx]
    clusters = []
    for group in np.split(members, bounds) if len(members) else []:
        cid = label[group[0]]
        clusters.append(Cluster(
            point_indices=group,
            candidate_count=int(cand[group].sum()),
            diameter=diameter(pts_all[group]),
            seed_indices=seed_idx[seed_lab == cid],
        ))
    return clusters


def passes(candidate_count: int, size: int, ratio_threshold: float = RATIO_THRESHOLD,
           min_points: int = MIN_CLUSTER_POINTS) -> Verdict:
    """Verdict for one cluster, compared in exact rational arithmetic."""
    if size < min_points:
        return Verdict.REJECTED_SIZE
    thr = Fraction(str(ratio_threshold))
    if candidate_count * thr.denominator >= thr.numerator * size:
        return Verdict.ACCEPTED
    return Verdict.REJECTED_RATIO


def validate_clusters(clusters: list[Cluster], ratio_threshold: float = RATIO_THRESHOLD,
                      min_points: int = MIN_CLUSTER_POINTS) -> list[Cluster]:
    """Accept iff ``size >= min_points`` and ``candidates / size >= ratio_threshold``.

    Size rejection takes precedence.  The threshold is read as the decimal
    it is written as, so 0.6 means exactly 3/5.
    """
    return [replace(c, verdict=passes(c.candidate_count, c.size, ratio_threshold, min_points))
            for c in clusters]
