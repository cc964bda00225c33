"""Sparse four-state occupancy grid with occlusion-aware ray tracing.

Voxels live in 16x16x16 blocks allocated on first touch.  Blocks are found
through an open-addressing hash table keyed by the packed block coordinate;
each voxel is a single byte holding the state (low two bits) and the
``ever_free`` flag (bit 2).

Scan integration is two-phase.  Phase 1 marks the voxels holding current
points (O) and the voxels that must not be carved this scan (B: the
26-neighbourhood of O plus the far part of every ray behind a range-image
discontinuity).  Phase 2 traces one ray per occupied voxel, from the sensor
to the closest point in it, and stops at the first voxel of O.  Both phases
only insert into sets, so the outcome does not depend on point order.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DegenerateRay

# 21 bits per axis, centred: +-2^20 voxels (+-315 km at 0.3 m)
_OFFSET = 1 << 20
_AXIS_MASK = (1 << 21) - 1
_EMPTY = -1
_HASH_MUL = 0x9E3779B97F4A7C15

BLOCK_SHIFT = 4
BLOCK_VOXELS = 1 << (3 * BLOCK_SHIFT)

_STATE_MASK = 3
_EVER_FREE = 4
_S_UNOBSERVED = 0
_S_FREE = 1
_S_OCCUPIED = 2
_S_BLOCKED = 3

# marks used during one integration
_MARK_BLOCKED = 1
_MARK_OCCUPIED = 2
# classification of traced voxels
_TRACE_FREE = 1
_TRACE_BLOCKED = 2


class VoxelState(enum.IntEnum):
    UNOBSERVED = 0
    FREE = 1
    OCCUPIED = 2
    BLOCKED = 3


class IntegrationMode(enum.Enum):
    FREE_SPACE_ONLY = "free_space_only"
    OCCUPANCY = "occupancy"


# --------------------------------------------------------------------------- keys

def pack_keys(idx: np.ndarray) -> np.ndarray:
    """Pack integer voxel coordinates ``(..., 3)`` into int64 keys."""
    idx = np.asarray(idx, dtype=np.int64)
    if np.any(np.abs(idx) >= _OFFSET):
        raise ValueError("voxel index outside the representable +-2^20 range")
    s = idx + _OFFSET
    return (s[..., 0] << 42) | (s[..., 1] << 21) | s[..., 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.stack([(keys >> 42) & _AXIS_MASK, (keys >> 21) & _AXIS_MASK, keys & _AXIS_MASK], axis=-1)
    return out - _OFFSET


def voxel_index(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """``floor(p / voxel_size)`` componentwise, as int64."""
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)


def point_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return pack_keys(voxel_index(points, voxel_size))


@njit(cache=True, inline="always")
def _pack(ix, iy, iz):
    return ((ix + _OFFSET) << 42) | ((iy + _OFFSET) << 21) | (iz + _OFFSET)


@njit(cache=True, inline="always")
def _slot(key, mask):
    # unsigned arithmetic: signed overflow is undefined behaviour in LLVM
    h = np.uint64(key) * np.uint64(_HASH_MUL)
    h ^= h >> np.uint64(29)
    return np.int64(h & np.uint64(mask))


# --------------------------------------------------------------------------- hash map

@njit(cache=True)
def _map_get(keys, vals, key):
    mask = keys.size - 1
    i = _slot(key, mask)
    while True:
        k = keys[i]
        if k == key:
            return vals[i]
        if k == _EMPTY:
            return -1
        i = (i + 1) & mask


@njit(cache=True)
def _map_put(keys, vals, key, val, overwrite):
    """Insert into a table with spare capacity; returns 1 if the key was new."""
    mask = keys.size - 1
    i = _slot(key, mask)
    while True:
        k = keys[i]
        if k == _EMPTY:
            keys[i] = key
            vals[i] = val
            return 1
        if k == key:
            if overwrite:
                vals[i] = val
            return 0
        i = (i + 1) & mask


@njit(cache=True)
def _map_grow(keys, vals):
    new_keys = np.full(keys.size * 2, _EMPTY, np.int64)
    new_vals = np.zeros(keys.size * 2, np.int64)
    for i in range(keys.size):
        if keys[i] != _EMPTY:
            _map_put(new_keys, new_vals, keys[i], vals[i], True)
    return new_keys, new_vals


# --------------------------------------------------------------------------- traversal

@njit(cache=True)
def _ray_voxels(ox, oy, oz, ex, ey, ez, vs, out_keys, out_texit):
    """Voxels crossed by segment [o, e) excluding the endpoint voxel.

    Fills ``out_keys`` in traversal order with the ray parameter at which the
    ray leaves each voxel (``out_texit``, clamped to 1); returns the count.
    Ties between axes step x first, then y, then z.
    """
    ax = ox / vs
    ay = oy / vs
    az = oz / vs
    bx = ex / vs
    by = ey / vs
    bz = ez / vs
    ix = np.int64(np.floor(ax))
    iy = np.int64(np.floor(ay))
    iz = np.int64(np.floor(az))
    jx = np.int64(np.floor(bx))
    jy = np.int64(np.floor(by))
    jz = np.int64(np.floor(bz))
    dx = bx - ax
    dy = by - ay
    dz = bz - az
    inf = np.inf
    if dx > 0:
        sx = 1
        tmx = (ix + 1 - ax) / dx
        tdx = 1.0 / dx
    elif dx < 0:
        sx = -1
        tmx = (ix - ax) / dx
        tdx = -1.0 / dx
    else:
        sx = 0
        tmx = inf
        tdx = inf
    if dy > 0:
        sy = 1
        tmy = (iy + 1 - ay) / dy
        tdy = 1.0 / dy
    elif dy < 0:
        sy = -1
        tmy = (iy - ay) / dy
        tdy = -1.0 / dy
    else:
        sy = 0
        tmy = inf
        tdy = inf
    if dz > 0:
        sz = 1
        tmz = (iz + 1 - az) / dz
        tdz = 1.0 / dz
    elif dz < 0:
        sz = -1
        tmz = (iz - az) / dz
        tdz = -1.0 / dz
    else:
        sz = 0
        tmz = inf
        tdz = inf
    n = 0
    cap = out_keys.size
    while n < cap:
        if ix == jx and iy == jy and iz == jz:
            break
        tnext = min(tmx, tmy, tmz)
        out_keys[n] = _pack(ix, iy, iz)
        out_texit[n] = min(tnext, 1.0)
        n += 1
        if tnext >= 1.0:
            # numerically ended inside this voxel
            break
        if tmx <= tmy and tmx <= tmz:
            ix += sx
            tmx += tdx
        elif tmy <= tmz:
            iy += sy
            tmy += tdy
        else:
            iz += sz
            tmz += tdz
    return n


def _buffer_len(origins: np.ndarray, ends: np.ndarray, vs: float) -> int:
    if len(origins) == 0:
        return 4
    span = np.abs(np.floor(ends / vs) - np.floor(origins / vs)).sum(axis=1)
    return int(span.max()) + 4


def traverse_ray(origin, endpoint, voxel_size: float) -> list[tuple[int, int, int]]:
    """Voxels intersected by ``[origin, endpoint)`` in order, without the endpoint voxel."""
    o = np.asarray(origin, dtype=np.float64).reshape(3)
    e = np.asarray(endpoint, dtype=np.float64).reshape(3)
    if np.linalg.norm(e - o) <= 1e-9:
        raise DegenerateRay(f"origin and endpoint coincide at {o.tolist()}")
    n_buf = _buffer_len(o[None], e[None], voxel_size)
    keys = np.empty(n_buf, np.int64)
    texit = np.empty(n_buf, np.float64)
    n = _ray_voxels(o[0], o[1], o[2], e[0], e[1], e[2], float(voxel_size), keys, texit)
    return [tuple(int(v) for v in row) for row in unpack_keys(keys[:n])]


# --------------------------------------------------------------------------- integration kernels

@njit(cache=True)
def _build_marks(occ_keys, disc_origins, disc_points, disc_from, vs, buf_len):
    """Phase 1: O (value 2) and B (value 1) in one hash table."""
    n_est = occ_keys.size * 8 + 64
    size = 64
    while size < 2 * n_est:
        size *= 2
    keys = np.full(size, _EMPTY, np.int64)
    vals = np.zeros(size, np.int64)
    used = 0
    for k in occ_keys:
        used += _map_put(keys, vals, k, _MARK_OCCUPIED, True)
    for k in occ_keys:
        cx = ((k >> 42) & _AXIS_MASK) - _OFFSET
        cy = ((k >> 21) & _AXIS_MASK) - _OFFSET
        cz = (k & _AXIS_MASK) - _OFFSET
        for ddx in range(-1, 2):
            for ddy in range(-1, 2):
                for ddz in range(-1, 2):
                    if 2 * (used + 1) > keys.size:
                        keys, vals = _map_grow(keys, vals)
                    used += _map_put(keys, vals, _pack(cx + ddx, cy + ddy, cz + ddz), _MARK_BLOCKED, False)
    buf_k = np.empty(buf_len, np.int64)
    buf_t = np.empty(buf_len, np.float64)
    for r in range(disc_points.shape[0]):
        o = disc_origins[r]
        p = disc_points[r]
        length = np.sqrt((p[0] - o[0]) ** 2 + (p[1] - o[1]) ** 2 + (p[2] - o[2]) ** 2)
        if length <= 0.0:
            continue
        n = _ray_voxels(o[0], o[1], o[2], p[0], p[1], p[2], vs, buf_k, buf_t)
        for j in range(n):
            if buf_t[j] * length > disc_from[r]:
                if 2 * (used + 1) > keys.size:
                    keys, vals = _map_grow(keys, vals)
                used += _map_put(keys, vals, buf_k[j], _MARK_BLOCKED, False)
    return keys, vals


@njit(cache=True)
def _trace(origins, points, vs, mark_keys, mark_vals, buf_len):
    """Phase 2: trace rays, stop at O, classify each traversed voxel once."""
    size = 1 << 16
    seen_k = np.full(size, _EMPTY, np.int64)
    seen_v = np.zeros(size, np.int64)
    used = 0
    out_k = np.empty(1 << 14, np.int64)
    out_c = np.empty(1 << 14, np.int8)
    n_out = 0
    buf_k = np.empty(buf_len, np.int64)
    buf_t = np.empty(buf_len, np.float64)
    for r in range(points.shape[0]):
        o = origins[r]
        p = points[r]
        n = _ray_voxels(o[0], o[1], o[2], p[0], p[1], p[2], vs, buf_k, buf_t)
        for j in range(n):
            k = buf_k[j]
            m = _map_get(mark_keys, mark_vals, k)
            if m == _MARK_OCCUPIED:
                break
            if 2 * (used + 1) > seen_k.size:
                seen_k, seen_v = _map_grow(seen_k, seen_v)
            if _map_put(seen_k, seen_v, k, 0, False):
                used += 1
                if n_out == out_k.size:
                    grown_k = np.empty(out_k.size * 2, np.int64)
                    grown_c = np.empty(out_k.size * 2, np.int8)
                    grown_k[:n_out] = out_k
                    grown_c[:n_out] = out_c
                    out_k = grown_k
                    out_c = grown_c
                out_k[n_out] = k
                out_c[n_out] = _TRACE_BLOCKED if m == _MARK_BLOCKED else _TRACE_FREE
                n_out += 1
    return out_k[:n_out], out_c[:n_out]


@njit(cache=True)
def _apply(bkeys, bslots, data, slot_keys, n_blocks, trace_keys, trace_cls, occ_keys, occupancy):
    """Write one scan's evidence into the grid; returns grown storage and candidates."""
    # count blocks that have to be allocated
    new_k = np.full(64, _EMPTY, np.int64)
    new_v = np.zeros(64, np.int64)
    n_new = 0
    n_keys = trace_keys.size + (occ_keys.size if occupancy else 0)
    for i in range(n_keys):
        k = trace_keys[i] if i < trace_keys.size else occ_keys[i - trace_keys.size]
        bk = _pack((((k >> 42) & _AXIS_MASK) - _OFFSET) >> BLOCK_SHIFT,
                   (((k >> 21) & _AXIS_MASK) - _OFFSET) >> BLOCK_SHIFT,
                   ((k & _AXIS_MASK) - _OFFSET) >> BLOCK_SHIFT)
        if _map_get(bkeys, bslots, bk) < 0:
            if 2 * (n_new + 1) > new_k.size:
                new_k, new_v = _map_grow(new_k, new_v)
            n_new += _map_put(new_k, new_v, bk, 0, False)
    if n_new:
        total = n_blocks + n_new
        if total > data.shape[0]:
            cap = data.shape[0]
            while cap < total:
                cap *= 2
            grown = np.zeros((cap, data.shape[1]), np.uint8)
            grown[:n_blocks] = data[:n_blocks]
            data = grown
            grown_sk = np.full(cap, _EMPTY, np.int64)
            grown_sk[:n_blocks] = slot_keys[:n_blocks]
            slot_keys = grown_sk
        while 2 * total > bkeys.size:
            bkeys, bslots = _map_grow(bkeys, bslots)
        for i in range(new_k.size):
            bk = new_k[i]
            if bk != _EMPTY:
                _map_put(bkeys, bslots, bk, n_blocks, True)
                slot_keys[n_blocks] = bk
                n_blocks += 1
    cand = np.empty(occ_keys.size if occupancy else 0, np.int64)
    n_cand = 0
    for i in range(n_keys):
        if i < trace_keys.size:
            k = trace_keys[i]
        else:
            k = occ_keys[i - trace_keys.size]
        x = ((k >> 42) & _AXIS_MASK) - _OFFSET
        y = ((k >> 21) & _AXIS_MASK) - _OFFSET
        z = (k & _AXIS_MASK) - _OFFSET
        slot = _map_get(bkeys, bslots, _pack(x >> BLOCK_SHIFT, y >> BLOCK_SHIFT, z >> BLOCK_SHIFT))
        local = (x & 15) | ((y & 15) << 4) | ((z & 15) << 8)
        b = data[slot, local]
        state = b & _STATE_MASK
        if i < trace_keys.size:
            if trace_cls[i] == _TRACE_FREE:
                data[slot, local] = np.uint8(_S_FREE | _EVER_FREE)
            elif state == _S_UNOBSERVED:
                data[slot, local] = np.uint8((b & 0xFC) | _S_BLOCKED)
        else:
            if state == _S_FREE:
                cand[n_cand] = k
                n_cand += 1
            data[slot, local] = np.uint8((b & 0xFC) | _S_OCCUPIED)
    return bkeys, bslots, data, slot_keys, n_blocks, cand[:n_cand]


@njit(cache=True)
def _lookup(bkeys, bslots, data, keys):
    out = np.zeros(keys.size, np.uint8)
    for i in range(keys.size):
        k = keys[i]
        x = ((k >> 42) & _AXIS_MASK) - _OFFSET
        y = ((k >> 21) & _AXIS_MASK) - _OFFSET
        z = (k & _AXIS_MASK) - _OFFSET
        slot = _map_get(bkeys, bslots, _pack(x >> BLOCK_SHIFT, y >> BLOCK_SHIFT, z >> BLOCK_SHIFT))
        if slot >= 0:
            out[i] = data[slot, (x & 15) | ((y & 15) << 4) | ((z & 15) << 8)]
    return out


# --------------------------------------------------------------------------- grid

@dataclass(frozen=True)
class ScanIntegrationResult:
    """Sorted int64 voxel keys (see :func:`unpack_keys`)."""

    candidate_voxels: np.ndarray
    occupied_voxels: np.ndarray
    traced_rays: int = 0

    def candidate_indices(self) -> set[tuple[int, int, int]]:
        return {tuple(int(v) for v in row) for row in unpack_keys(self.candidate_voxels)}

    def occupied_indices(self) -> set[tuple[int, int, int]]:
        return {tuple(int(v) for v in row) for row in unpack_keys(self.occupied_voxels)}


class VoxelGrid:
    """Sparse global occupancy grid; every voxel starts ``UNOBSERVED``."""

    def __init__(self, voxel_size: float = 0.3):
        if not voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self._bkeys = np.full(256, _EMPTY, np.int64)
        self._bslots = np.zeros(256, np.int64)
        self._data = np.zeros((64, BLOCK_VOXELS), np.uint8)
        self._slot_keys = np.full(64, _EMPTY, np.int64)
        self._n_blocks = 0

    @property
    def n_blocks(self) -> int:
        return self._n_blocks

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """Raw voxel bytes for packed keys (state in bits 0-1, ever_free in bit 2)."""
        keys = np.ascontiguousarray(keys, dtype=np.int64).ravel()
        return _lookup(self._bkeys, self._bslots, self._data, keys)

    def states(self, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raw = self.lookup(keys)
        return raw & _STATE_MASK, (raw & _EVER_FREE) != 0

    def query_state(self, p) -> tuple[VoxelState, bool]:
        raw = self.lookup(point_keys(np.asarray(p, dtype=np.float64).reshape(1, 3), self.voxel_size))[0]
        return VoxelState(raw & _STATE_MASK), bool(raw & _EVER_FREE)

    def set_state(self, idx, state: VoxelState, ever_free: bool | None = None) -> None:
        """Force one voxel's state; for tests and debugging."""
        key = pack_keys(np.asarray(idx, dtype=np.int64).reshape(1, 3))
        old_state, old_ever = self.states(key)
        if ever_free is None:
            ever_free = bool(old_ever[0]) or state == VoxelState.FREE
        cls = np.array([_TRACE_FREE], np.int8)
        # allocate through the free path, then overwrite the byte
        self._bkeys, self._bslots, self._data, self._slot_keys, self._n_blocks, _ = _apply(
            self._bkeys, self._bslots, self._data, self._slot_keys, self._n_blocks,
            key, cls, np.empty(0, np.int64), False)
        x, y, z = (int(v) for v in np.asarray(idx).reshape(3))
        bk = pack_keys(np.array([[x >> BLOCK_SHIFT, y >> BLOCK_SHIFT, z >> BLOCK_SHIFT]]))[0]
        slot = _map_get(self._bkeys, self._bslots, bk)
        self._data[slot, (x & 15) | ((y & 15) << 4) | ((z & 15) << 8)] = int(state) | (_EVER_FREE if ever_free else 0)

    def allocated(self) -> tuple[np.ndarray, np.ndarray]:
        """Keys and raw bytes of every touched voxel, sorted by key."""
        n = self._n_blocks
        data = self._data[:n]
        slot, local = np.nonzero(data)
        bidx = unpack_keys(self._slot_keys[:n][slot])
        local = local.astype(np.int64)
        idx = (bidx << BLOCK_SHIFT) + np.stack([local & 15, (local >> 4) & 15, local >> 8], axis=-1)
        keys = pack_keys(idx)
        order = np.argsort(keys)
        return keys[order], data[slot, local][order]

    def count_states(self) -> dict[VoxelState, int]:
        _, raw = self.allocated()
        counts = np.bincount(raw & _STATE_MASK, minlength=4)
        counts[0] = 0
        return {s: int(counts[s]) for s in VoxelState if s != VoxelState.UNOBSERVED}

    def dump(self) -> str:
        """One line per touched voxel: ``ix iy iz state ever_free``."""
        keys, raw = self.allocated()
        idx = unpack_keys(keys)
        names = [s.name.lower() for s in VoxelState]
        lines = [f"{x} {y} {z} {names[b & _STATE_MASK]} {int(bool(b & _EVER_FREE))}"
                 for (x, y, z), b in zip(idx.tolist(), raw.tolist())]
        return "\n".join(lines) + ("\n" if lines else "")

    def copy(self) -> VoxelGrid:
        g = VoxelGrid(self.voxel_size)
        g._bkeys = self._bkeys.copy()
        g._bslots = self._bslots.copy()
        g._data = self._data.copy()
        g._slot_keys = self._slot_keys.copy()
        g._n_blocks = self._n_blocks
        return g

    def integrate_points(self, points: np.ndarray, origins: np.ndarray, ranges: np.ndarray,
                         blocked_from: np.ndarray, mode: IntegrationMode) -> ScanIntegrationResult:
        """Integrate valid world-frame points with their per-point sensor origins.

        ``blocked_from`` holds, per point, the range beyond which the point's
        ray must not carve free space (``inf`` for none).
        """
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        origins = np.ascontiguousarray(np.broadcast_to(origins, points.shape), dtype=np.float64)
        ranges = np.asarray(ranges, dtype=np.float64).ravel()
        blocked_from = np.asarray(blocked_from, dtype=np.float64).ravel()
        vs = self.voxel_size
        empty = np.empty(0, np.int64)
        if len(points) == 0:
            return ScanIntegrationResult(empty, empty)
        keys = point_keys(points, vs)
        # closest point per voxel; full lexicographic tie-break keeps it order-free
        order = np.lexsort((origins[:, 2], origins[:, 1], origins[:, 0],
                            points[:, 2], points[:, 1], points[:, 0], ranges, keys))
        sk = keys[order]
        first = np.ones(len(sk), bool)
        first[1:] = sk[1:] != sk[:-1]
        occ_keys = sk[first]
        rays = order[first]
        disc = np.flatnonzero(np.isfinite(blocked_from))
        disc_o, disc_p = origins[disc], points[disc]
        buf_len = max(_buffer_len(origins[rays], points[rays], vs), _buffer_len(disc_o, disc_p, vs))
        mark_k, mark_v = _build_marks(occ_keys, disc_o, disc_p, blocked_from[disc], vs, buf_len)
        trace_k, trace_c = _trace(origins[rays], points[rays], vs, mark_k, mark_v, buf_len)
        occupancy = mode == IntegrationMode.OCCUPANCY
        (self._bkeys, self._bslots, self._data, self._slot_keys, self._n_blocks, cand) = _apply(
            self._bkeys, self._bslots, self._data, self._slot_keys, self._n_blocks,
            trace_k, trace_c, occ_keys, occupancy)
        return ScanIntegrationResult(np.sort(cand), occ_keys, len(rays))


def query_state(grid: VoxelGrid, p) -> tuple[VoxelState, bool]:
    return grid.query_state(p)


def detect_blocked_rays(scan, voxel_size: float) -> np.ndarray:
    """Per-pixel range beyond which the pixel's ray is blocked (``inf`` if not).

    Two 4-adjacent valid pixels (azimuth wraps) form a discontinuity when
    their ranges differ by more than ``voxel_size``; the farther pixel is then
    blocked from the nearer pixel's range.  Uses the sensor-frame ranges.
    """
    r = np.where(scan.valid, scan.range, np.nan)
    out = np.full(r.shape, np.inf)

    def consider(near):
        # ``near`` is the neighbour range aligned to each pixel (nan if none)
        with np.errstate(invalid="ignore"):
            hit = (r - near) > voxel_size
        np.minimum(out, np.where(hit, near, np.inf), out=out)

    consider(np.roll(r, 1, axis=1))
    consider(np.roll(r, -1, axis=1))
    pad = np.full((1, r.shape[1]), np.nan)
    consider(np.vstack([pad, r[:-1]]))
    consider(np.vstack([r[1:], pad]))
    out[~scan.valid] = np.inf
    return out


def integrate_scan(grid: VoxelGrid, scan, sensor_origin=None,
                   mode: IntegrationMode = IntegrationMode.OCCUPANCY,
                   blocked_from: np.ndarray | None = None) -> ScanIntegrationResult:
    """Integrate a world-frame organized scan into ``grid``.

    ``sensor_origin`` may be a single world point; otherwise the per-point
    origins recorded by undistortion are used.
    """
    if blocked_from is None:
        blocked_from = detect_blocked_rays(scan, grid.voxel_size)
    v = scan.valid
    if sensor_origin is not None:
        origins = np.broadcast_to(np.asarray(sensor_origin, dtype=np.float64).reshape(3), (int(v.sum()), 3))
    elif scan.origin is not None:
        origins = scan.origin[v]
    else:
        origins = np.zeros((int(v.sum()), 3))
    return grid.integrate_points(scan.xyz[v], origins, scan.range[v], blocked_from[v], mode)
