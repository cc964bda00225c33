"""LOAM-style feature tagging and static map aggregation from labeled scans."""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import MisalignedSequences
from .scan import OrganizedScan, Trajectory, undistort
from .voxel_grid import point_keys

NEIGHBORHOOD = 10
SECTORS = 6
EDGES_PER_SECTOR = 2
PLANES_PER_SECTOR = 4
MAP_MAX_RANGE = 30.0
MAP_VOXEL = 0.1


class FeatureKind(enum.Enum):
    EDGE = "edge"
    PLANE = "plane"


class FeatureClass(enum.Enum):
    UNKNOWN = "unknown"
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass(frozen=True, eq=False)
class Feature:
    kind: FeatureKind
    index: int
    smoothness: float
    contributing: np.ndarray = field(repr=False)
    classification: FeatureClass = FeatureClass.UNKNOWN


def smoothness(scan: OrganizedScan, neighborhood: int = NEIGHBORHOOD) -> np.ndarray:
    """``c = |sum_j (r_j - r_i)| / (|N| r_i)`` over ``neighborhood/2`` pixels each side.

    NaN where the window leaves the row or touches an invalid pixel.
    """
    half = neighborhood // 2
    r = np.where(scan.valid, scan.range, 0.0)
    rows, cols = r.shape
    c = np.full(r.shape, np.nan)
    if cols < 2 * half + 1:
        return c
    csum = np.concatenate([np.zeros((rows, 1)), np.cumsum(r, axis=1)], axis=1)
    vsum = np.concatenate([np.zeros((rows, 1)), np.cumsum(scan.valid, axis=1)], axis=1)
    lo = np.arange(cols - 2 * half)
    hi = lo + 2 * half + 1
    win = csum[:, hi] - csum[:, lo]
    nvalid = vsum[:, hi] - vsum[:, lo]
    ri = r[:, half:cols - half]
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.abs(win - (2 * half + 1) * ri) / (2 * half * ri)
    c[:, half:cols - half] = np.where(nvalid == 2 * half + 1, val, np.nan)
    return c


def extract_features(scan: OrganizedScan, neighborhood: int = NEIGHBORHOOD, sectors: int = SECTORS,
                     n_edges: int = EDGES_PER_SECTOR, n_planes: int = PLANES_PER_SECTOR) -> list[Feature]:
    """Per row and sector: the ``n_edges`` sharpest points as edges, the ``n_planes`` smoothest as planes.

    Only points whose whole neighbourhood is valid and inside the row are
    eligible.  Ties are broken by column so the selection is deterministic.
    """
    half = neighborhood // 2
    c = smoothness(scan, neighborhood)
    rows, cols = c.shape
    feats = []
    if cols < 2 * half + 1:
        return feats
    bounds = np.linspace(half, cols - half, sectors + 1).round().astype(int)
    offsets = np.arange(-half, half + 1)
    for r in range(rows):
        for s in range(sectors):
            a, b = bounds[s], bounds[s + 1]
            seg = c[r, a:b]
            ok = np.flatnonzero(~np.isnan(seg))
            if ok.size == 0:
                continue
            vals = seg[ok]
            desc = ok[np.lexsort((ok, -vals))]
            asc = ok[np.lexsort((ok, vals))]
            edges = desc[:n_edges]
            planes = asc[~np.isin(asc, edges)][:n_planes]
            for kind, picks in ((FeatureKind.EDGE, edges), (FeatureKind.PLANE, planes)):
                for k in picks:
                    col = a + int(k)
                    feats.append(Feature(kind, r * cols + col, float(c[r, col]), r * cols + col + offsets))
    return feats


def classify_features(features: list[Feature], labels) -> list[Feature]:
    """Static iff every contributing point is labeled static (0 or 2)."""
    lab = np.asarray(getattr(labels, "labels", labels)).ravel()
    out = []
    for f in features:
        if f.contributing.size and f.contributing.max() >= lab.size:
            raise MisalignedSequences("feature indices exceed the label array")
        dyn = bool((lab[f.contributing] == 1).any())
        out.append(Feature(f.kind, f.index, f.smoothness, f.contributing,
                           FeatureClass.DYNAMIC if dyn else FeatureClass.STATIC))
    return out


@dataclass(eq=False)
class AggregateMap:
    xyz: np.ndarray
    intensity: np.ndarray
    label: np.ndarray
    voxel_size: float

    def __len__(self):
        return len(self.xyz)

    def voxel_keys(self) -> np.ndarray:
        return point_keys(self.xyz, self.voxel_size)


class _Accumulator:
    """Per-voxel sums, reduced lazily, for the nearest-to-centroid representative."""

    def __init__(self, voxel: float):
        self.voxel = voxel
        self.parts = []

    def add(self, xyz):
        if len(xyz) == 0:
            return
        k = point_keys(xyz, self.voxel)
        u, inv = np.unique(k, return_inverse=True)
        s = np.zeros((len(u), 3))
        np.add.at(s, inv, xyz)
        self.parts.append((u, s, np.bincount(inv, minlength=len(u))))

    def centroids(self):
        if not self.parts:
            return np.empty(0, np.int64), np.empty((0, 3))
        k = np.concatenate([p[0] for p in self.parts])
        s = np.concatenate([p[1] for p in self.parts])
        n = np.concatenate([p[2] for p in self.parts])
        u, inv = np.unique(k, return_inverse=True)
        ss = np.zeros((len(u), 3))
        np.add.at(ss, inv, s)
        nn = np.bincount(inv, weights=n, minlength=len(u))
        return u, ss / nn[:, None]


def _load_pair(scan, lab):
    from .formats import read_labels, read_scan

    if isinstance(scan, (str, os.PathLike)):
        scan = read_scan(scan)
    if isinstance(lab, (str, os.PathLike)):
        lab = read_labels(lab, scan.rows, scan.cols)
    lab = np.asarray(getattr(lab, "labels", lab))
    if lab.size != scan.n_points:
        raise MisalignedSequences("label array does not match scan size")
    return scan, lab.reshape(scan.valid.shape)


def build_clean_map(scans, labels, traj: Trajectory, max_range: float = MAP_MAX_RANGE,
                    downsample: float = MAP_VOXEL) -> tuple[AggregateMap, AggregateMap]:
    """Static map and dynamic layer, both voxel-downsampled.

    Points with sensor range above ``max_range`` are dropped, the rest are
    undistorted into the world frame and split by label (1 = dynamic,
    anything else static).  Each occupied ``downsample`` voxel keeps the
    real point nearest to its centroid; scans are streamed twice (sums,
    then selection) so nothing but per-voxel state is held in memory.
    """
    scans, labels = list(scans), list(labels)
    if len(scans) != len(labels):
        raise MisalignedSequences(f"{len(scans)} scans but {len(labels)} label sets")

    def layers():
        for s, l in zip(scans, labels):
            scan, lab = _load_pair(s, l)
            keep = scan.valid & (scan.range <= max_range)
            world = undistort(scan, traj)
            for dyn in (False, True):
                m = keep & ((lab == 1) == dyn)
                yield dyn, world.xyz[m], scan.intensity[m]

    acc = {False: _Accumulator(downsample), True: _Accumulator(downsample)}
    for dyn, xyz, _ in layers():
        acc[dyn].add(xyz)
    cents = {d: a.centroids() for d, a in acc.items()}

    best = {False: [], True: []}
    for dyn, xyz, inten in layers():
        if len(xyz) == 0:
            continue
        u, cen = cents[dyn]
        k = point_keys(xyz, downsample)
        pos = np.searchsorted(u, k)
        d = np.linalg.norm(xyz - cen[pos], axis=1)
        order = np.lexsort((d, k))
        first = np.ones(len(order), bool)
        first[1:] = k[order][1:] != k[order][:-1]
        sel = order[first]
        best[dyn].append((k[sel], d[sel], xyz[sel], inten[sel]))

    out = []
    for dyn in (False, True):
        if not best[dyn]:
            out.append(AggregateMap(np.empty((0, 3)), np.empty(0), np.empty(0, np.uint8), downsample))
            continue
        k = np.concatenate([b[0] for b in best[dyn]])
        d = np.concatenate([b[1] for b in best[dyn]])
        p = np.concatenate([b[2] for b in best[dyn]])
        it = np.concatenate([b[3] for b in best[dyn]])
        # stable sort keeps the earliest scan among equal distances
        order = np.lexsort((d, k))
        first = np.ones(len(order), bool)
        first[1:] = k[order][1:] != k[order][:-1]
        sel = order[first]
        out.append(AggregateMap(p[sel], it[sel], np.full(len(sel), int(dyn), np.uint8), downsample))
    return out[0], out[1]
