"""Report figures.  Everything renders off-screen to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "figure.figsize": (7.0, 3.6),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}

_STAGE_COLORS = {
    "io": "#8c8c8c", "undistort": "#4c72b0", "integrate": "#dd8452",
    "ground": "#55a868", "cluster": "#c44e52", "validate": "#8172b3",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-stable
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_iou(report, path, title: str | None = None) -> Path:
    """Per-scan IoU over the sequence, with the pooled value as a reference line."""
    with plt.rc_context(_STYLE):
        fig, (ax, ax2) = plt.subplots(2, 1, sharex=True, gridspec_kw={"height_ratios": [2, 1]})
        x = np.arange(len(report.scan_ids))
        iou = report.per_scan_iou
        d = report.defined
        ax.plot(x[d], iou[d], ".", ms=3, color="#4c72b0", label="per scan")
        ax.axhline(report.sequence_iou, color="#c44e52", lw=1, label=f"pooled {report.sequence_iou:.3f}")
        ax.set_ylim(-0.02, 1.02)
        ax.set_ylabel("IoU (dynamic)")
        ax.legend(loc="lower left")
        if title:
            ax.set_title(title)
        ax2.plot(x, report.tp, lw=0.8, label="TP", color="#55a868")
        ax2.plot(x, report.fp, lw=0.8, label="FP", color="#dd8452")
        ax2.plot(x, report.fn, lw=0.8, label="FN", color="#8172b3")
        ax2.set_xlabel("scan")
        ax2.set_ylabel("points")
        ax2.legend(loc="upper right", ncol=3)
        return _save(fig, path)


def plot_timing(records, path, title: str | None = None) -> Path:
    """Stacked per-scan stage times plus the mean breakdown."""
    from .evaluation import STAGES, measure_throughput

    stats = measure_throughput(records)
    with plt.rc_context(_STYLE):
        fig, (ax, ax2) = plt.subplots(1, 2, gridspec_kw={"width_ratios": [3, 1]})
        x = np.arange(len(records))
        bottom = np.zeros(len(records))
        for s in STAGES:
            v = np.array([r.get(s, 0.0) for r in records])
            if not v.any():
                continue
            ax.bar(x, v, bottom=bottom, width=1.0, color=_STAGE_COLORS[s], label=s, lw=0)
            bottom += v
        ax.set_xlabel("scan")
        ax.set_ylabel("seconds")
        ax.legend(loc="upper right", ncol=3)
        if title:
            ax.set_title(title)
        names = [s for s in STAGES if s in stats.mean]
        ax2.barh(names, [stats.mean[s] for s in names], color=[_STAGE_COLORS[s] for s in names])
        ax2.errorbar([stats.p95[s] for s in names], names, fmt="|", color="k", ms=8, label="p95")
        ax2.invert_yaxis()
        ax2.set_xlabel("mean s/scan")
        ax2.set_title(f"total {stats.total_mean:.3f} s", fontsize=9)
        return _save(fig, path)


def plot_map(static_map, dynamic_layer, path, max_points: int = 200_000) -> Path:
    """Top-down view of the clean map with the dynamic layer on top."""
    rng = np.random.default_rng(0)

    def thin(a):
        if len(a) <= max_points:
            return a
        return a[np.sort(rng.choice(len(a), max_points, replace=False))]

    s = thin(static_map.xyz)
    d = thin(dynamic_layer.xyz)
    with plt.rc_context({**_STYLE, "figure.figsize": (6.0, 6.0), "axes.grid": False}):
        fig, ax = plt.subplots()
        if len(s):
            ax.scatter(s[:, 0], s[:, 1], s=0.2, c="0.45", lw=0, label=f"static ({len(static_map)})")
        if len(d):
            ax.scatter(d[:, 0], d[:, 1], s=0.4, c="#d62728", lw=0, label=f"dynamic ({len(dynamic_layer)})")
        ax.set_aspect("equal")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.legend(loc="upper right", markerscale=10)
        return _save(fig, path)
