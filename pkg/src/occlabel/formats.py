"""Readers and writers for the on-disk formats.

Scan file (``.bin``), little-endian::

    b"DOLS"  u16 version  u16 rows  u16 cols  f64 frame_timestamp
    rows*cols records of  f32 x, f32 y, f32 z, f32 range, f32 intensity,
                          f64 timestamp, u8 valid

Label file (``.label``): one little-endian u32 per point, row-major.

Trajectory file: text, ``timestamp tx ty tz qx qy qz qw`` per line (TUM).

All writers are deterministic and all readers reject structural anomalies
instead of guessing.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagic, CorruptRecord, FormatError, TrailingData, TruncatedFile, UnsupportedVersion
from .scan import OrganizedScan, Trajectory

SCAN_MAGIC = b"DOLS"
SCAN_VERSION = 1
SCAN_SUFFIX = ".bin"
LABEL_SUFFIX = ".label"

_HEADER = struct.Struct("<4sHHHd")
RECORD_DTYPE = np.dtype([
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("range", "<f4"), ("intensity", "<f4"),
    ("timestamp", "<f8"), ("valid", "u1"),
])
assert RECORD_DTYPE.itemsize == 29

# largest label value with a defined meaning (2 = ground debug)
MAX_LABEL = 2


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


# --------------------------------------------------------------------------- scans

def scan_to_bytes(scan: OrganizedScan) -> bytes:
    if scan.frame != "sensor":
        raise ValueError("only sensor-frame scans are serialized")
    if scan.rows > 0xFFFF or scan.cols > 0xFFFF:
        raise ValueError("scan dimensions exceed u16")
    rec = np.empty(scan.n_points, dtype=RECORD_DTYPE)
    xyz = scan.xyz.reshape(-1, 3)
    rec["x"], rec["y"], rec["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    rec["range"] = scan.range.ravel()
    rec["intensity"] = scan.intensity.ravel()
    rec["timestamp"] = scan.timestamp.ravel()
    rec["valid"] = scan.valid.ravel()
    header = _HEADER.pack(SCAN_MAGIC, SCAN_VERSION, scan.rows, scan.cols, float(scan.frame_timestamp))
    return header + rec.tobytes()


def write_scan(scan: OrganizedScan, path) -> None:
    _atomic_write(Path(path), scan_to_bytes(scan))


def scan_from_bytes(data: bytes, path=None) -> OrganizedScan:
    if len(data) < 4:
        raise TruncatedFile("file shorter than magic", path, len(data))
    if data[:4] != SCAN_MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}", path, 0)
    if len(data) < 6:
        raise TruncatedFile("header truncated before version", path, len(data))
    (version,) = struct.unpack_from("<H", data, 4)
    if version != SCAN_VERSION:
        raise UnsupportedVersion(f"unsupported scan format version {version}", path, 4)
    if len(data) < _HEADER.size:
        raise TruncatedFile("header truncated", path, len(data))
    _, _, rows, cols, frame_ts = _HEADER.unpack_from(data, 0)
    n = rows * cols
    body = len(data) - _HEADER.size
    expected = n * RECORD_DTYPE.itemsize
    if body < expected:
        complete = body // RECORD_DTYPE.itemsize
        raise TruncatedFile(f"expected {n} records, file ends inside record {complete}",
                            path, _HEADER.size + complete * RECORD_DTYPE.itemsize)
    if body > expected:
        raise TrailingData(f"{body - expected} bytes after last record", path, _HEADER.size + expected)
    rec = np.frombuffer(data, dtype=RECORD_DTYPE, count=n, offset=_HEADER.size)
    bad = np.flatnonzero(rec["valid"] > 1)
    if bad.size:
        raise CorruptRecord(f"valid flag {rec['valid'][bad[0]]} is not 0/1", path,
                            _HEADER.size + int(bad[0]) * RECORD_DTYPE.itemsize + 28)
    valid = rec["valid"].astype(bool)
    bad = np.flatnonzero(~valid & (rec["range"] != 0))
    if bad.size:
        raise CorruptRecord("invalid point with nonzero range", path,
                            _HEADER.size + int(bad[0]) * RECORD_DTYPE.itemsize)
    shape = (rows, cols)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=-1).astype(np.float64).reshape(shape + (3,))
    return OrganizedScan(
        xyz=xyz,
        range=rec["range"].astype(np.float64).reshape(shape),
        intensity=rec["intensity"].astype(np.float64).reshape(shape),
        timestamp=rec["timestamp"].copy().reshape(shape),
        valid=valid.reshape(shape),
        frame_timestamp=float(frame_ts),
    )


def read_scan(path) -> OrganizedScan:
    path = Path(path)
    return scan_from_bytes(path.read_bytes(), path)


def list_scans(scan_dir) -> list[Path]:
    scan_dir = Path(scan_dir)
    if not scan_dir.is_dir():
        raise FileNotFoundError(f"scan directory not found: {scan_dir}")
    return sorted(scan_dir.glob("*" + SCAN_SUFFIX))


# --------------------------------------------------------------------------- labels

def labels_to_bytes(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > MAX_LABEL):
        raise ValueError("label values must lie in 0..2")
    return labels.astype("<u4").ravel().tobytes()


def write_labels(labels: np.ndarray, path) -> None:
    _atomic_write(Path(path), labels_to_bytes(labels))


def read_labels(path, rows: int, cols: int) -> np.ndarray:
    """Labels as a ``(rows, cols)`` uint32 array."""
    path = Path(path)
    data = path.read_bytes()
    expected = rows * cols * 4
    if len(data) < expected or len(data) % 4:
        raise TruncatedFile(f"expected {expected} bytes of labels, got {len(data)}", path,
                            len(data) - len(data) % 4)
    if len(data) > expected:
        raise TrailingData(f"{len(data) - expected} bytes past {rows}x{cols} labels", path, expected)
    labels = np.frombuffer(data, dtype="<u4").reshape(rows, cols)
    bad = np.flatnonzero(labels.ravel() > MAX_LABEL)
    if bad.size:
        raise CorruptRecord(f"label value {labels.ravel()[bad[0]]} out of range", path, int(bad[0]) * 4)
    return labels.astype(np.uint32)


# --------------------------------------------------------------------------- trajectories

def write_trajectory(traj: Trajectory, path) -> None:
    lines = []
    for t, tr, q in zip(traj.timestamps, traj.translations, traj.rotations):
        vals = [t, *tr, *q]
        lines.append(" ".join(repr(float(v)) for v in vals))
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"trajectory file not found: {path}")
    ts, trs, qs = [], [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"expected 8 fields, got {len(parts)}", path, lineno)
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise FormatError("non-numeric field", path, lineno) from None
        q = np.array(vals[4:])
        norm = np.linalg.norm(q)
        # text round-off is tolerated, anything larger is a broken file
        if abs(norm - 1.0) > 1e-3:
            raise FormatError(f"quaternion norm {norm:.6f} is not 1", path, lineno)
        ts.append(vals[0])
        trs.append(vals[1:4])
        qs.append(q / norm)
    if len(ts) < 2:
        raise FormatError("trajectory needs at least 2 poses", path, None)
    try:
        return Trajectory(np.array(ts), np.array(trs), np.array(qs))
    except ValueError as exc:
        raise FormatError(str(exc), path, None) from None


# --------------------------------------------------------------------------- PLY

_LABEL_COLORS = np.array([[0, 0, 0], [220, 30, 30], [60, 120, 220]], dtype=np.uint8)


def write_ply(path, xyz: np.ndarray, intensity: np.ndarray, label: np.ndarray, colorize: bool = False) -> None:
    """Binary little-endian PLY with ``x y z intensity label`` (+ ``red green blue``)."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    n = len(xyz)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4"), ("label", "u1")]
    if colorize:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(n, dtype=fields)
    rec["x"], rec["y"], rec["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    rec["intensity"] = np.asarray(intensity).ravel()
    lab = np.asarray(label).ravel().astype(np.uint8)
    rec["label"] = lab
    if colorize:
        rgb = _LABEL_COLORS[np.minimum(lab, len(_LABEL_COLORS) - 1)].copy()
        # static points shaded by intensity
        gray = (60 + 180 * np.clip(rec["intensity"], 0, 1)).astype(np.uint8)
        rgb[lab == 0] = gray[lab == 0, None]
        rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    types = {"<f4": "float", "u1": "uchar"}
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {types[t]} {name}" for name, t in fields]
    header.append("end_header")
    _atomic_write(Path(path), ("\n".join(header) + "\n").encode("ascii") + rec.tobytes())


def read_ply(path) -> np.ndarray:
    """Read back a PLY written by :func:`write_ply` as a structured array."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise BadMagic("not a PLY file", path, 0)
    header = data[:end].decode("ascii").splitlines()
    n = None
    fields = []
    types = {"float": "<f4", "uchar": "u1"}
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            fields.append((parts[2], types[parts[1]]))
    dtype = np.dtype(fields)
    body = data[end + len(b"end_header\n"):]
    if n is None or len(body) != n * dtype.itemsize:
        raise TruncatedFile("PLY body length does not match header", path, end)
    return np.frombuffer(body, dtype=dtype, count=n)


# --------------------------------------------------------------------------- manifests

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, manifest: dict) -> None:
    _atomic_write(Path(path), (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def verify_manifest(manifest: dict, root) -> list[str]:
    """Names of files whose content hash no longer matches the manifest."""
    root = Path(root)
    bad = []
    for name, digest in sorted(manifest.get("files", {}).items()):
        p = root / name
        if not p.is_file() or sha256_file(p) != digest:
            bad.append(name)
    return bad
