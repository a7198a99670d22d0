"""Hourly aggregation and count-series metrics.

Window-level predictions are clamped at zero and summed into hour bins,
with windows straddling an hour boundary contributing proportionally to
their overlap. Series are compared with MAE, MAE as a fraction of the true
mean, and a generalized accuracy sum(min)/sum(max) — an intersection-over-
union on count mass. Categories that make up less than one per mille of
the true events are flagged as unreliable in the report rather than
reported silently.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import BridgeflowError, CATEGORY_NAMES, N_CATEGORIES, _as_readonly_f64

__all__ = [
    "LengthMismatch",
    "UNRELIABLE_SHARE",
    "HourlySeries",
    "hourly_aggregate",
    "events_to_hourly",
    "mae",
    "mae_percent",
    "generalized_accuracy",
    "mae_accuracy_identity_check",
    "restrict_hours",
    "metrics_report",
    "write_metrics_csv",
    "read_metrics_csv",
]


class LengthMismatch(BridgeflowError):
    """Series cover different hour grids."""


#: Categories whose share of true events falls below this are flagged.
UNRELIABLE_SHARE = 1e-3


@dataclass(frozen=True)
class HourlySeries:
    """Per-hour category counts: ``hour_starts`` (seconds, strictly
    increasing) paired with a [H x 4] non-negative count matrix."""

    hour_starts: tuple
    counts: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "hour_starts", tuple(float(h) for h in self.hour_starts))
        object.__setattr__(self, "counts", _as_readonly_f64(self.counts, 2, "counts"))

    def violations(self) -> list[str]:
        out = []
        if self.counts.ndim != 2 or self.counts.shape != (
            len(self.hour_starts),
            N_CATEGORIES,
        ):
            out.append(
                f"counts must be [{len(self.hour_starts)} x {N_CATEGORIES}], "
                f"got {self.counts.shape}"
            )
        if np.any(self.counts < 0):
            out.append("counts must be non-negative")
        if any(b <= a for a, b in zip(self.hour_starts, self.hour_starts[1:])):
            out.append("hour starts must be strictly increasing")
        return out

    @property
    def n_hours(self) -> int:
        return len(self.hour_starts)


def _check_pair(pred: HourlySeries, true: HourlySeries) -> None:
    if pred.n_hours != true.n_hours:
        raise LengthMismatch(
            f"series cover {pred.n_hours} vs {true.n_hours} hours"
        )
    if pred.hour_starts != true.hour_starts:
        raise LengthMismatch("series hour grids differ")


def hourly_aggregate(
    window_starts,
    predictions,
    window_seconds: float,
    origin: Optional[float] = None,
) -> HourlySeries:
    """Sum per-window count vectors into hour bins.

    Predictions are clamped at zero. A window overlapping several hours
    splits its counts proportionally to the overlap; the hour grid starts
    at ``origin`` (default: the window-aligned hour floor of the earliest
    start) and runs contiguously to the last touched hour.
    """
    starts = np.asarray(window_starts, dtype=np.float64)
    preds = np.clip(np.asarray(predictions, dtype=np.float64), 0.0, None)
    if starts.ndim != 1 or preds.ndim != 2 or preds.shape != (
        starts.size,
        N_CATEGORIES,
    ):
        raise LengthMismatch(
            f"{starts.size} window starts vs predictions {preds.shape}"
        )
    if window_seconds <= 0:
        raise ValueError(f"window_seconds must be positive, got {window_seconds}")
    if starts.size == 0:
        return HourlySeries((), np.zeros((0, N_CATEGORIES)))
    if origin is None:
        origin = math.floor(starts.min() / 3600.0) * 3600.0
    if starts.min() < origin:
        raise ValueError("origin lies after the first window start")
    last_end = starts.max() + window_seconds
    n_hours = max(1, int(math.ceil((last_end - origin) / 3600.0 - 1e-12)))
    counts = np.zeros((n_hours, N_CATEGORIES))
    for t0, row in zip(starts, preds):
        t1 = t0 + window_seconds
        h0 = int(math.floor((t0 - origin) / 3600.0))
        h1 = min(int(math.floor((t1 - origin) / 3600.0)), n_hours - 1)
        for h in range(h0, h1 + 1):
            bin_lo = origin + h * 3600.0
            overlap = min(t1, bin_lo + 3600.0) - max(t0, bin_lo)
            if overlap > 0:
                counts[h] += (overlap / window_seconds) * row
    hour_starts = tuple(origin + h * 3600.0 for h in range(n_hours))
    return HourlySeries(hour_starts, counts)


def events_to_hourly(
    events,
    origin: Optional[float] = None,
    n_hours: Optional[int] = None,
) -> HourlySeries:
    """Ground-truth hourly counts from vehicle events.

    Each event contributes one count split across hours by dwell overlap
    (consistent with aggregating window labels over a tiling window grid).
    """
    from .core import category_index  # local import to avoid cycles at init

    if not events and n_hours is None:
        raise ValueError("cannot infer the hour grid from zero events")
    if origin is None:
        origin = math.floor(min(e.t_entry for e in events) / 3600.0) * 3600.0
    if n_hours is None:
        n_hours = int(math.ceil((max(e.t_exit for e in events) - origin) / 3600.0))
    counts = np.zeros((n_hours, N_CATEGORIES))
    for event in events:
        k = category_index(event.vehicle_class, event.lane)
        dwell = event.t_exit - event.t_entry
        h0 = max(0, int(math.floor((event.t_entry - origin) / 3600.0)))
        h1 = min(n_hours - 1, int(math.floor((event.t_exit - origin) / 3600.0)))
        for h in range(h0, h1 + 1):
            lo = origin + h * 3600.0
            overlap = min(event.t_exit, lo + 3600.0) - max(event.t_entry, lo)
            if overlap > 0:
                counts[h, k] += overlap / dwell
    return HourlySeries(tuple(origin + 3600.0 * h for h in range(n_hours)), counts)


def mae(pred: HourlySeries, true: HourlySeries) -> np.ndarray:
    """Per-category mean absolute error over hours."""
    _check_pair(pred, true)
    return np.mean(np.abs(pred.counts - true.counts), axis=0)


def mae_percent(pred: HourlySeries, true: HourlySeries) -> np.ndarray:
    """MAE normalized by the mean of the true series (NaN when that is 0)."""
    errors = mae(pred, true)
    means = true.counts.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(means > 0, errors / np.where(means > 0, means, 1.0), np.nan)
    return out


def generalized_accuracy(pred: HourlySeries, true: HourlySeries) -> np.ndarray:
    """Per-category sum(min)/sum(max) over hours; 1.0 when both sides are
    identically zero (empty union counts as perfect agreement)."""
    _check_pair(pred, true)
    if np.any(pred.counts < 0) or np.any(true.counts < 0):
        raise ValueError("generalized_accuracy requires non-negative series")
    overlap = np.minimum(pred.counts, true.counts).sum(axis=0)
    union = np.maximum(pred.counts, true.counts).sum(axis=0)
    return np.where(union > 0, overlap / np.where(union > 0, union, 1.0), 1.0)


def mae_accuracy_identity_check(
    pred: HourlySeries, true: HourlySeries, tolerance: float = 1e-9
) -> bool:
    """Self-test of the identity sum|p-y| = sum(max) - sum(min), which ties
    MAE to the accuracy's union/overlap decomposition."""
    _check_pair(pred, true)
    if np.any(pred.counts < 0) or np.any(true.counts < 0):
        raise ValueError("identity check requires non-negative series")
    lhs = np.abs(pred.counts - true.counts).sum(axis=0)
    rhs = np.maximum(pred.counts, true.counts).sum(axis=0) - np.minimum(
        pred.counts, true.counts
    ).sum(axis=0)
    return bool(np.all(np.abs(lhs - rhs) <= tolerance))


def restrict_hours(series: HourlySeries, hour_starts: Sequence[float]) -> HourlySeries:
    """Subset a series to the given hour starts (all must be present)."""
    index = {h: i for i, h in enumerate(series.hour_starts)}
    missing = [h for h in hour_starts if float(h) not in index]
    if missing:
        raise LengthMismatch(f"hours not in series: {missing}")
    rows = [index[float(h)] for h in hour_starts]
    return HourlySeries(tuple(float(h) for h in hour_starts), series.counts[rows])


def metrics_report(pred: HourlySeries, true: HourlySeries) -> list[dict]:
    """Per-category rows: MAE, MAE fraction-of-mean, accuracy, and a note
    flagging categories below the reliability share."""
    maes = mae(pred, true)
    percents = mae_percent(pred, true)
    accuracies = generalized_accuracy(pred, true)
    totals = true.counts.sum(axis=0)
    grand_total = totals.sum()
    rows = []
    for k, name in enumerate(CATEGORY_NAMES):
        share = totals[k] / grand_total if grand_total > 0 else 0.0
        note = ""
        if share < UNRELIABLE_SHARE:
            note = (
                f"unreliable: category is {share:.6f} of true events "
                f"(< {UNRELIABLE_SHARE})"
            )
        rows.append(
            {
                "category": name,
                "mae": float(maes[k]),
                "mae_percent": float(percents[k]),
                "accuracy": float(accuracies[k]),
                "note": note,
            }
        )
    return rows


_COLUMNS = ("category", "mae", "mae_percent", "accuracy", "note")


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row[key] for key in _COLUMNS})


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            for key in ("mae", "mae_percent", "accuracy"):
                row[key] = float(row[key])
            rows.append(row)
    return rows
