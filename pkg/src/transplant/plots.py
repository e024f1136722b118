"""Render report figures to image files, next to the delimited output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from transplant import metrics  # noqa: E402

FIG_SIZE = (6.0, 3.6)
DPI = 150


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def continuity_figure(series: dict, path) -> Path:
    """CDFs of per-object unavailable-time fraction, one curve per system."""
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    for label, fractions in series.items():
        pts = metrics.cdf_points(fractions)
        if not pts:
            continue
        xs = [0.0] + [p[0] for p in pts]
        ys = [0.0] + [p[1] for p in pts]
        ax.step(xs, ys, where="post", label=f"{label} (median {metrics.median(fractions):.2f})")
    ax.set_xlabel("fraction of migration time unavailable")
    ax.set_ylabel("CDF over objects")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def scaling_figure(reports, path) -> Path:
    """Virtual cost vs DAG size with least-squares lines per algorithm."""
    series = metrics.scaling_series(reports)
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    markers = {"deletion": "o", "independent": "s", "validation": "^"}
    for name, (xs, ys) in series.items():
        if not xs:
            continue
        fit = metrics.linear_fit(xs, ys)
        ax.scatter(xs, ys, s=12, alpha=0.6, marker=markers.get(name, "o"), label=f"{name} (R²={fit.r_squared:.3f})")
        lo, hi = min(xs), max(xs)
        ax.plot([lo, hi], [fit.slope * lo + fit.intercept, fit.slope * hi + fit.intercept], lw=1)
    ax.set_xlabel("nodes + edges")
    ax.set_ylabel("virtual cost")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def rates_figure(summary: dict, path) -> Path:
    """Per-node migration cost by type (lower is faster)."""
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    labels = sorted(summary)
    values = [summary[label]["cost_per_node"] for label in labels]
    ax.bar(labels, values, width=0.5, color="#4878a8")
    ax.set_ylabel("virtual cost per migrated node")
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.0f}", ha="center", va="bottom", fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def anomalies_figure(curves: dict, path) -> Path:
    """Dangling-object percentage vs migrated users, one line per app."""
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    for app_id, points in curves.items():
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        ax.plot(xs, ys, label=app_id, lw=1.4)
    ax.set_xlabel("users migrated")
    ax.set_ylabel("dangling objects (% of total)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)
