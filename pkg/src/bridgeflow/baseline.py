"""Unsupervised peak-detection counting baseline.

Strain channels of each lane's girder line are max-pooled into one trace;
local maxima inside the configured amplitude band are counted as vehicle
passages, with amplitude deciding light versus heavy. The light/heavy
boundary can be calibrated per lane by exhaustive grid search minimizing
hourly MAE against labeled events.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.signal import find_peaks

from .core import (
    BridgeflowError,
    LaneId,
    SensorModality,
    SignalRecord,
    VehicleClass,
    category_index,
)
from .dsp import MisalignedChannels
from .metrics import HourlySeries, events_to_hourly, mae

__all__ = [
    "NoGroundTruth",
    "PeakConfig",
    "detect_peaks",
    "classify_counts",
    "pool_lane_signal",
    "hourly_counts",
    "calibrate_thresholds",
    "PeakDetectionCounter",
]


class NoGroundTruth(BridgeflowError):
    """Calibration lacks labeled events or a long-enough span."""


_DEFAULT_SENSORS = {
    LaneId.LEFT_OVERTAKING: (1, 2, 3, 4),
    LaneId.RIGHT_SLOW: (5, 6, 7, 8),
}


@dataclass(frozen=True)
class PeakConfig:
    """Detection settings: minimum peak spacing (seconds) and per-lane
    amplitude bands on normalized strain.

    Within a lane the light band is [low, boundary) and the heavy band
    [boundary, high] — adjacent, disjoint, boundary ties go to heavy.
    ``lane_sensors`` maps each lane to the strain sensor ids pooled for it.
    """

    min_distance: float = 0.1
    left_light_low: float = 0.04
    left_boundary: float = 0.4
    left_high: float = 1.0
    right_light_low: float = 0.035
    right_boundary: float = 0.1
    right_high: float = 1.0
    lane_sensors: tuple = (
        (LaneId.LEFT_OVERTAKING.value, (1, 2, 3, 4)),
        (LaneId.RIGHT_SLOW.value, (5, 6, 7, 8)),
    )

    def band(self, lane: LaneId) -> tuple[float, float, float]:
        """(low, boundary, high) for a lane."""
        if lane is LaneId.LEFT_OVERTAKING:
            return (self.left_light_low, self.left_boundary, self.left_high)
        return (self.right_light_low, self.right_boundary, self.right_high)

    def class_range(self, lane: LaneId, cls: VehicleClass) -> tuple[float, float]:
        low, boundary, high = self.band(lane)
        return (low, boundary) if cls is VehicleClass.LIGHT else (boundary, high)

    def sensors(self, lane: LaneId) -> tuple[int, ...]:
        for lane_value, ids in self.lane_sensors:
            if lane_value == lane.value:
                return tuple(ids)
        return _DEFAULT_SENSORS[lane]

    def with_boundary(self, lane: LaneId, boundary: float) -> "PeakConfig":
        if lane is LaneId.LEFT_OVERTAKING:
            return replace(self, left_boundary=float(boundary))
        return replace(self, right_boundary=float(boundary))

    def violations(self) -> list[str]:
        out = []
        if self.min_distance <= 0:
            out.append(f"min_distance must be positive, got {self.min_distance}")
        for lane in (LaneId.LEFT_OVERTAKING, LaneId.RIGHT_SLOW):
            low, boundary, high = self.band(lane)
            if not low < boundary:
                out.append(f"{lane.value}: light band [{low}, {boundary}) is empty")
            if not boundary <= high:
                out.append(f"{lane.value}: heavy band [{boundary}, {high}] is empty")
            if low < 0:
                out.append(f"{lane.value}: bands must be non-negative")
            if not self.sensors(lane):
                out.append(f"{lane.value}: no sensors mapped")
        return out

    def to_dict(self) -> dict:
        return {
            "min_distance": self.min_distance,
            "left_light_low": self.left_light_low,
            "left_boundary": self.left_boundary,
            "left_high": self.left_high,
            "right_light_low": self.right_light_low,
            "right_boundary": self.right_boundary,
            "right_high": self.right_high,
            "lane_sensors": [[lane, list(ids)] for lane, ids in self.lane_sensors],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PeakConfig":
        kwargs = dict(data)
        if "lane_sensors" in kwargs:
            kwargs["lane_sensors"] = tuple(
                (lane, tuple(ids)) for lane, ids in kwargs["lane_sensors"]
            )
        return cls(**kwargs)


def detect_peaks(
    signal: np.ndarray,
    rate: float,
    config: PeakConfig,
    lane: LaneId,
    t0: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Local maxima within the lane's amplitude band, at least
    ``min_distance`` seconds apart (conflicts keep the higher peak).

    Returns (times, amplitudes).
    """
    low, _, high = config.band(lane)
    samples = np.asarray(signal, dtype=np.float64)
    if samples.ndim != 1:
        raise ValueError(f"expected a 1-D pooled signal, got shape {samples.shape}")
    # Subtract a hair before ceiling so e.g. 0.1 s * 100 Hz stays 10 samples.
    distance = max(1, math.ceil(config.min_distance * rate - 1e-9))
    idx, _ = find_peaks(samples, height=(low, high), distance=distance)
    return t0 + idx / rate, samples[idx]


def classify_counts(
    amplitudes: np.ndarray, config: PeakConfig, lane: LaneId
) -> dict[VehicleClass, int]:
    """Split detected peak amplitudes into light/heavy by the lane boundary
    (boundary value itself counts as heavy)."""
    amps = np.asarray(amplitudes, dtype=np.float64)
    _, boundary, _ = config.band(lane)
    heavy = int(np.count_nonzero(amps >= boundary))
    return {VehicleClass.LIGHT: amps.size - heavy, VehicleClass.HEAVY: heavy}


def pool_lane_signal(
    records: Sequence[SignalRecord], config: PeakConfig, lane: LaneId
) -> tuple[np.ndarray, float, float]:
    """Elementwise max across the lane's strain sensors.

    Returns (pooled samples, rate, t0); channels must be aligned.
    """
    wanted = set(config.sensors(lane))
    picked = [
        r
        for r in records
        if r.modality is SensorModality.STRAIN and r.sensor_id in wanted
    ]
    if not picked:
        raise MisalignedChannels(
            f"no strain channels found for lane {lane.value} "
            f"(looked for sensors {sorted(wanted)})"
        )
    first = picked[0]
    for r in picked[1:]:
        if (
            abs(r.t0 - first.t0) > 1e-9
            or abs(r.sample_rate - first.sample_rate) > 1e-9
            or r.samples.size != first.samples.size
        ):
            raise MisalignedChannels(
                f"lane {lane.value} channels differ in t0/rate/length"
            )
    pooled = np.maximum.reduce([r.samples for r in picked])
    return pooled, first.sample_rate, first.t0


def hourly_counts(
    records: Sequence[SignalRecord],
    config: Optional[PeakConfig] = None,
    origin: Optional[float] = None,
) -> HourlySeries:
    """Detect, classify, and bin peaks into the 4-category hourly series."""
    config = config or PeakConfig()
    problems = config.violations()
    if problems:
        raise ValueError("; ".join(problems))
    lanes = (LaneId.LEFT_OVERTAKING, LaneId.RIGHT_SLOW)
    pooled = {lane: pool_lane_signal(records, config, lane) for lane in lanes}
    t0 = min(p[2] for p in pooled.values())
    end = max(p[2] + p[0].size / p[1] for p in pooled.values())
    if origin is None:
        origin = math.floor(t0 / 3600.0) * 3600.0
    n_hours = max(1, int(math.ceil((end - origin) / 3600.0 - 1e-12)))
    counts = np.zeros((n_hours, 4))
    for lane in lanes:
        samples, rate, start = pooled[lane]
        times, amps = detect_peaks(samples, rate, config, lane, t0=start)
        _, boundary, _ = config.band(lane)
        hours = np.floor((times - origin) / 3600.0).astype(int)
        hours = np.clip(hours, 0, n_hours - 1)
        for cls, mask in (
            (VehicleClass.LIGHT, amps < boundary),
            (VehicleClass.HEAVY, amps >= boundary),
        ):
            k = category_index(cls, lane)
            counts[:, k] += np.bincount(hours[mask], minlength=n_hours)
    return HourlySeries(tuple(origin + 3600.0 * h for h in range(n_hours)), counts)


def _lane_hourly_mae(
    times: np.ndarray,
    amps: np.ndarray,
    boundary: float,
    truth: HourlySeries,
    lane: LaneId,
    origin: float,
) -> float:
    """Hourly MAE (light + heavy) of a candidate boundary for one lane."""
    n_hours = truth.n_hours
    hours = np.clip(np.floor((times - origin) / 3600.0).astype(int), 0, n_hours - 1)
    total = 0.0
    for cls, mask in (
        (VehicleClass.LIGHT, amps < boundary),
        (VehicleClass.HEAVY, amps >= boundary),
    ):
        pred = np.bincount(hours[mask], minlength=n_hours)
        true = truth.counts[:, category_index(cls, lane)]
        total += float(np.mean(np.abs(pred - true)))
    return total


def calibrate_thresholds(
    records: Sequence[SignalRecord],
    events,
    config: Optional[PeakConfig] = None,
    grid_step: float = 0.005,
    grid: Optional[dict] = None,
) -> PeakConfig:
    """Grid-search each lane's light/heavy boundary to minimize hourly MAE
    against labeled events; ties pick the lower boundary.

    ``grid`` optionally maps LaneId to explicit candidate boundaries.
    """
    config = config or PeakConfig()
    problems = config.violations()
    if problems:
        raise ValueError("; ".join(problems))
    if not events:
        raise NoGroundTruth("calibration requires labeled events")
    lanes = (LaneId.LEFT_OVERTAKING, LaneId.RIGHT_SLOW)
    pooled = {lane: pool_lane_signal(records, config, lane) for lane in lanes}
    t0 = min(p[2] for p in pooled.values())
    end = max(p[2] + p[0].size / p[1] for p in pooled.values())
    if end - t0 < 3600.0 - 1e-9:
        raise NoGroundTruth(
            f"calibration span is {(end - t0) / 3600.0:.2f} h; need >= 1 h"
        )
    origin = math.floor(t0 / 3600.0) * 3600.0
    n_hours = max(1, int(math.ceil((end - origin) / 3600.0 - 1e-12)))
    truth = events_to_hourly(events, origin=origin, n_hours=n_hours)

    calibrated = config
    for lane in lanes:
        samples, rate, start = pooled[lane]
        times, amps = detect_peaks(samples, rate, config, lane, t0=start)
        low, _, high = config.band(lane)
        if grid is not None and lane in grid:
            candidates = np.asarray(sorted(grid[lane]), dtype=np.float64)
        else:
            candidates = low + grid_step * np.arange(
                1, int(math.floor((high - low) / grid_step - 1e-12)) + 1
            )
        if candidates.size == 0:
            raise ValueError(f"empty boundary grid for lane {lane.value}")
        best_boundary, best_mae = None, math.inf
        for boundary in candidates:  # ascending: first win = lowest boundary
            score = _lane_hourly_mae(times, amps, boundary, truth, lane, origin)
            if score < best_mae:
                best_boundary, best_mae = float(boundary), score
        calibrated = calibrated.with_boundary(lane, best_boundary)
    return calibrated


class PeakDetectionCounter:
    """Estimator-style wrapper: ``fit`` calibrates per-lane boundaries from
    labeled events, ``predict`` returns the hourly count series."""

    def __init__(
        self,
        min_distance: float = 0.1,
        left_light_low: float = 0.04,
        left_boundary: float = 0.4,
        left_high: float = 1.0,
        right_light_low: float = 0.035,
        right_boundary: float = 0.1,
        right_high: float = 1.0,
        grid_step: float = 0.005,
    ):
        self.min_distance = min_distance
        self.left_light_low = left_light_low
        self.left_boundary = left_boundary
        self.left_high = left_high
        self.right_light_low = right_light_low
        self.right_boundary = right_boundary
        self.right_high = right_high
        self.grid_step = grid_step

    _PARAM_NAMES = (
        "min_distance",
        "left_light_low",
        "left_boundary",
        "left_high",
        "right_light_low",
        "right_boundary",
        "right_high",
        "grid_step",
    )

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._PARAM_NAMES}

    def set_params(self, **params) -> "PeakDetectionCounter":
        for name, value in params.items():
            if name not in self._PARAM_NAMES:
                raise ValueError(f"unknown parameter {name!r}")
            setattr(self, name, value)
        return self

    def _config(self) -> PeakConfig:
        return PeakConfig(
            min_distance=self.min_distance,
            left_light_low=self.left_light_low,
            left_boundary=self.left_boundary,
            left_high=self.left_high,
            right_light_low=self.right_light_low,
            right_boundary=self.right_boundary,
            right_high=self.right_high,
        )

    def fit(self, X: Sequence[SignalRecord], y) -> "PeakDetectionCounter":
        """Calibrate boundaries on strain records ``X`` and events ``y``."""
        calibrated = calibrate_thresholds(
            X, y, config=self._config(), grid_step=self.grid_step
        )
        self.left_boundary = calibrated.left_boundary
        self.right_boundary = calibrated.right_boundary
        self.config_ = calibrated
        return self

    def predict(self, X: Sequence[SignalRecord]) -> HourlySeries:
        return hourly_counts(X, self._config())

    def score(self, X: Sequence[SignalRecord], y) -> float:
        """Negative total hourly MAE against events (higher is better)."""
        pred = self.predict(X)
        truth = events_to_hourly(
            y, origin=pred.hour_starts[0], n_hours=pred.n_hours
        )
        return -float(np.sum(mae(pred, truth)))
