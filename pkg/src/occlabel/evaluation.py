"""Dynamic-class IoU scoring and per-stage throughput statistics."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MisalignedSequences

STAGES = ("io", "undistort", "integrate", "ground", "cluster", "validate")


def iou_from_counts(tp: int, fp: int, fn: int) -> float:
    """TP / (TP + FP + FN); 1.0 when all three are zero."""
    den = tp + fp + fn
    return 1.0 if den == 0 else tp / den


@dataclass
class IoUReport:
    scan_ids: list[str]
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def per_scan_iou(self) -> np.ndarray:
        return np.array([iou_from_counts(*c) for c in zip(self.tp.tolist(), self.fp.tolist(), self.fn.tolist())])

    @property
    def defined(self) -> np.ndarray:
        """Scans where at least one of TP, FP, FN is nonzero."""
        return (self.tp + self.fp + self.fn) > 0

    @property
    def sequence_iou(self) -> float:
        return iou_from_counts(int(self.tp.sum()), int(self.fp.sum()), int(self.fn.sum()))

    @property
    def mean_iou(self) -> float:
        """Mean over scans with a defined IoU (nan if there are none)."""
        d = self.defined
        return float(self.per_scan_iou[d].mean()) if d.any() else float("nan")

    def subset(self, scan_ids) -> IoUReport:
        keep = [self.scan_ids.index(s) for s in scan_ids]
        return IoUReport([self.scan_ids[k] for k in keep], self.tp[keep], self.fp[keep], self.fn[keep])

    def summary(self) -> dict:
        return {
            "scans": len(self.scan_ids),
            "scans_defined": int(self.defined.sum()),
            "tp": int(self.tp.sum()), "fp": int(self.fp.sum()), "fn": int(self.fn.sum()),
            "sequence_iou": self.sequence_iou,
            "mean_iou": self.mean_iou,
        }

    def rows(self) -> list[dict]:
        ious = self.per_scan_iou
        return [{"scan_id": s, "tp": int(a), "fp": int(b), "fn": int(c), "iou": float(i), "defined": bool(d)}
                for s, a, b, c, i, d in zip(self.scan_ids, self.tp, self.fp, self.fn, ious, self.defined)]


def _as_pairs(seq):
    """Accept ``(scan_id, labels)`` pairs, LabeledScan objects or a dict."""
    if isinstance(seq, dict):
        return list(seq.items())
    out = []
    for item in seq:
        if hasattr(item, "scan_id"):
            out.append((item.scan_id, item.labels))
        else:
            out.append((item[0], item[1]))
    return out


def compute_iou(pred, truth, valid=None) -> IoUReport:
    """Score predicted dynamic labels against ground truth.

    ``valid`` (optional, aligned list of masks) restricts counting to valid
    points; invalid points are labeled 0 on both sides by construction, so
    they contribute nothing either way.  Label value 2 counts as static.
    """
    p, t = _as_pairs(pred), _as_pairs(truth)
    if [a for a, _ in p] != [b for b, _ in t]:
        raise MisalignedSequences("prediction and truth scan ids differ")
    if valid is not None and len(valid) != len(p):
        raise MisalignedSequences("validity masks do not match the sequence length")
    tp, fp, fn = [], [], []
    for k, ((sid, lp), (_, lt)) in enumerate(zip(p, t)):
        lp, lt = np.asarray(lp), np.asarray(lt)
        if lp.shape != lt.shape:
            raise MisalignedSequences(f"scan {sid}: shapes {lp.shape} and {lt.shape} differ")
        dp, dt = lp == 1, lt == 1
        if valid is not None:
            v = np.asarray(valid[k]).reshape(lp.shape)
            dp, dt = dp & v, dt & v
        tp.append(int((dp & dt).sum()))
        fp.append(int((dp & ~dt).sum()))
        fn.append(int((~dp & dt).sum()))
    return IoUReport([a for a, _ in p], np.array(tp, np.int64), np.array(fp, np.int64), np.array(fn, np.int64))


# --------------------------------------------------------------------------- throughput

class StageTimer:
    """Per-scan wall-clock accounting by stage.

    >>> timer = StageTimer()
    >>> with timer.stage("io"):
    ...     pass
    >>> timer.end_scan()
    """

    def __init__(self):
        self.records: list[dict[str, float]] = []
        self._current: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self._current[name] = self._current.get(name, 0.0) + time.perf_counter() - t0

    def add(self, name: str, seconds: float) -> None:
        self._current[name] = self._current.get(name, 0.0) + seconds

    def end_scan(self) -> None:
        self.records.append(self._current)
        self._current = {}


@dataclass
class ThroughputStats:
    scans: int
    mean: dict[str, float] = field(default_factory=dict)
    p95: dict[str, float] = field(default_factory=dict)
    total_mean: float = float("nan")
    total_p95: float = float("nan")

    def as_dict(self) -> dict:
        return {"scans": self.scans, "mean": self.mean, "p95": self.p95,
                "total_mean": self.total_mean, "total_p95": self.total_p95}


def measure_throughput(records) -> ThroughputStats:
    """Mean and 95th percentile per stage and for the per-scan total."""
    if isinstance(records, StageTimer):
        records = records.records
    records = list(records)
    if not records:
        return ThroughputStats(0)
    names = [s for s in STAGES if any(s in r for r in records)]
    names += sorted({k for r in records for k in r} - set(names))
    table = np.array([[r.get(s, 0.0) for s in names] for r in records])
    totals = table.sum(axis=1)
    return ThroughputStats(
        scans=len(records),
        mean={s: float(table[:, k].sum() / len(records)) for k, s in enumerate(names)},
        p95={s: float(np.percentile(table[:, k], 95)) for k, s in enumerate(names)},
        total_mean=float(totals.sum() / len(records)),
        total_p95=float(np.percentile(totals, 95)),
    )


def load_label_dir(directory, rows: int | None = None, cols: int | None = None) -> list[tuple[str, np.ndarray]]:
    """``(scan_id, labels)`` for every ``*.label`` in a directory, sorted by name.

    Without ``rows``/``cols`` the labels come back flat.
    """
    from .formats import LABEL_SUFFIX, read_labels

    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"label directory not found: {directory}")
    out = []
    for p in sorted(directory.glob("*" + LABEL_SUFFIX)):
        if rows is None:
            n = p.stat().st_size // 4
            out.append((p.stem, read_labels(p, 1, n).ravel()))
        else:
            out.append((p.stem, read_labels(p, rows, cols)))
    return out
