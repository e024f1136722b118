"""Experiment metrics: service continuity, migration rates, scaling fits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def unavailability_fractions(reports, include_undisplayed: bool = False) -> list[float]:
    """Per-object unavailable-time fraction for a batch of migrations.

    An object's downtime runs from the moment it leaves the source until
    it is admitted for display at the destination, normalized by its
    migration's own span (first removal to last display). Objects with no
    display event have no defined downtime (they sit in bags awaiting a
    future migration, or stayed locked); they are excluded unless
    `include_undisplayed`, which counts them as 1.0.
    """
    fractions = []
    for report in reports:
        removals = [t.src_invisible for t in report.timeline.values() if t.src_invisible is not None]
        displays = [t.displayed for t in report.timeline.values() if t.displayed is not None]
        if not removals:
            continue
        start = min(removals)
        end = max(displays + [report.finished_at or start])
        span = max(end - start, 1)
        for t in report.timeline.values():
            if t.src_invisible is None:
                continue
            if t.displayed is None:
                if include_undisplayed:
                    fractions.append(1.0)
            else:
                fractions.append(min(max(t.displayed - t.src_invisible, 0) / span, 1.0))
    return fractions


def undisplayed_share(reports) -> float:
    """Share of removed objects that never re-displayed (parked in bags)."""
    removed = shown = 0
    for report in reports:
        for t in report.timeline.values():
            if t.src_invisible is None:
                continue
            removed += 1
            if t.displayed is not None:
                shown += 1
    return (removed - shown) / removed if removed else 0.0


def cdf_points(values) -> list[tuple[float, float]]:
    xs = sorted(values)
    n = len(xs)
    return [(x, (i + 1) / n) for i, x in enumerate(xs)]


def median(values) -> float:
    return float(np.median(values)) if len(values) else 0.0


def first_order_dominates(a, b, grid_steps: int = 21) -> bool:
    """CDF of `a` lies on or above CDF of `b` across a fraction grid."""
    a = sorted(a)
    b = sorted(b)
    if not a or not b:
        return False
    for i in range(grid_steps):
        x = i / (grid_steps - 1)
        fa = _cdf_at(a, x)
        fb = _cdf_at(b, x)
        if fa + 1e-9 < fb:
            return False
    return True


def _cdf_at(sorted_values, x) -> float:
    import bisect

    return bisect.bisect_right(sorted_values, x) / len(sorted_values)


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r_squared: float
    n: int

    def to_dict(self):
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "n": self.n,
        }


def linear_fit(xs, ys) -> LinearFit:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if len(xs) < 2:
        return LinearFit(0.0, float(ys[0]) if len(ys) else 0.0, 1.0, len(xs))
    slope, intercept = np.polyfit(xs, ys, 1)
    predicted = slope * xs + intercept
    ss_res = float(np.sum((ys - predicted) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return LinearFit(float(slope), float(intercept), r2, len(xs))


def scaling_series(reports) -> dict:
    """Per-algorithm (size, virtual cost) points from migration reports.

    Migration cost is plotted against the user's source nodes+edges; the
    validation series uses the destination shape, which is what the
    validator actually walks.
    """
    series = {"deletion": ([], []), "independent": ([], []), "validation": ([], [])}
    for report in reports:
        if report.outcome != "committed":
            continue
        size = report.src_nodes + report.src_edges
        if report.migration_type in ("deletion", "independent"):
            xs, ys = series[report.migration_type]
            xs.append(size)
            ys.append(report.migration_cost)
        if report.validation_cost and report.dst_nodes:
            xs, ys = series["validation"]
            xs.append(report.dst_nodes + report.dst_edges)
            ys.append(report.validation_cost)
    return series


def scaling_fits(reports) -> dict:
    return {
        name: linear_fit(xs, ys)
        for name, (xs, ys) in scaling_series(reports).items()
        if xs
    }


def rates_summary(reports) -> dict:
    """Total and per-node virtual cost by migration type."""
    out = {}
    for report in reports:
        if report.outcome != "committed":
            continue
        bucket = out.setdefault(
            report.migration_type, {"total_cost": 0, "nodes": 0, "migrations": 0}
        )
        bucket["total_cost"] += report.migration_cost
        bucket["nodes"] += report.counts.get("migrated", 0)
        bucket["migrations"] += 1
    for bucket in out.values():
        bucket["cost_per_node"] = (
            bucket["total_cost"] / bucket["nodes"] if bucket["nodes"] else 0.0
        )
    return out
