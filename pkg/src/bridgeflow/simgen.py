"""Synthetic traffic and bridge-response generator.

Traffic is a per-category homogeneous Poisson stream thinned by a same-lane
minimum headway, with truncated-normal speeds. Each crossing loads the deck
as a single equivalent point load: strain gauges see a triangular influence
line while the vehicle is on the plane; accelerometers see a damped
sinusoid rung up when the load passes the node. Lane/girder coupling makes
the far girder respond at a reduced gain. Hour-sized chunks are generated
independently from derived seeds, so rendering parallelizes and reruns are
bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .core import (
    LaneId,
    N_CATEGORIES,
    SensorModality,
    SignalRecord,
    VehicleClass,
    VehicleEvent,
    category_pair,
)

__all__ = [
    "BridgeModel",
    "TrafficModel",
    "DEFAULT_CLASS_WEIGHT_TONNES",
    "DEFAULT_AXLES",
    "RATE_ACCELERATION",
    "RATE_STRAIN",
    "default_bridge",
    "default_traffic",
    "sample_traffic",
    "strain_response",
    "accel_response",
    "render_signals",
    "iter_render_chunks",
]

#: Equivalent point loads per class (tonnes): axle structure collapsed.
DEFAULT_CLASS_WEIGHT_TONNES = {VehicleClass.LIGHT: 2.0, VehicleClass.HEAVY: 25.0}

#: Axle-count metadata emitted with synthetic events.
DEFAULT_AXLES = {VehicleClass.LIGHT: 2, VehicleClass.HEAVY: 5}

_LANE_SIDE = {LaneId.LEFT_OVERTAKING: 0, LaneId.RIGHT_SLOW: 1}

CHUNK_SECONDS = 3600.0

#: Native sensor sampling rates (Hz).
RATE_ACCELERATION = 250.0
RATE_STRAIN = 100.0


@dataclass(frozen=True)
class BridgeModel:
    """Instrumented bridge: 8 sensor nodes on two girder lines x four
    longitudinal stations, with per-node modal frequencies and a symmetric
    lane-to-girder coupling matrix."""

    span: float = 25.0
    node_x: tuple[float, ...] = (1.8, 1.8, 1.8, 1.8, 5.4, 5.4, 5.4, 5.4)
    node_y: tuple[float, ...] = (
        3.125, 9.375, 15.625, 21.875, 3.125, 9.375, 15.625, 21.875,
    )
    girder_lane: tuple[LaneId, ...] = (
        LaneId.LEFT_OVERTAKING, LaneId.LEFT_OVERTAKING,
        LaneId.LEFT_OVERTAKING, LaneId.LEFT_OVERTAKING,
        LaneId.RIGHT_SLOW, LaneId.RIGHT_SLOW,
        LaneId.RIGHT_SLOW, LaneId.RIGHT_SLOW,
    )
    modal_freq: tuple[float, ...] = (3.0, 4.4, 5.7, 3.7, 5.0, 6.4, 7.1, 8.0)
    damping_ratio: float = 0.02
    coupling: tuple[tuple[float, float], tuple[float, float]] = (
        (1.0, 0.35),
        (0.35, 1.0),
    )
    noise_std_accel: float = 0.02
    noise_std_strain: float = 0.02
    accel_gain: float = 0.003
    strain_gain: float = 1.0

    @property
    def n_nodes(self) -> int:
        return len(self.node_y)

    def coupling_gain(self, lane: LaneId, node: int) -> float:
        return self.coupling[_LANE_SIDE[lane]][_LANE_SIDE[self.girder_lane[node]]]

    def violations(self) -> list[str]:
        out = []
        n = self.n_nodes
        if not (len(self.node_x) == len(self.girder_lane) == len(self.modal_freq) == n):
            out.append("node_x, node_y, girder_lane and modal_freq lengths must match")
        if self.span <= 0:
            out.append(f"span must be positive, got {self.span}")
        if any(not 0 <= y <= self.span for y in self.node_y):
            out.append("node ordinates must lie within the span")
        if not 0 < self.damping_ratio < 1:
            out.append(f"damping_ratio must lie in (0, 1), got {self.damping_ratio}")
        if any(f <= 0 for f in self.modal_freq):
            out.append("modal frequencies must be positive")
        c = self.coupling
        if abs(c[0][1] - c[1][0]) > 1e-12:
            out.append("coupling matrix must be symmetric")
        if not (c[0][0] >= c[0][1] >= 0 and c[1][1] >= c[1][0] >= 0):
            out.append("same-side coupling must dominate the cross term")
        if self.noise_std_accel < 0 or self.noise_std_strain < 0:
            out.append("noise levels must be non-negative")
        return out


@dataclass(frozen=True)
class TrafficModel:
    """Per-category Poisson rates (vehicles/hour, canonical category order),
    truncated-normal speeds per class and the same-lane minimum headway.

    Default rates are proportional to one observed week of traffic
    (55572 / 68498 / 52 / 4784 light-left / light-right / heavy-left /
    heavy-right over 70 monitored hours)."""

    hourly_rate: tuple[float, ...] = (
        68498 / 70.0,  # light_right
        55572 / 70.0,  # light_left
        4784 / 70.0,   # heavy_right
        52 / 70.0,     # heavy_left
    )
    speed_mean_kmh: tuple[float, float] = (96.5, 85.0)  # (light, heavy)
    speed_std_kmh: tuple[float, float] = (11.7, 13.1)
    speed_min_kmh: float = 30.0
    weight_mean_tonnes: tuple[float, float] = (2.0, 25.0)
    min_headway: float = 0.5

    def rate(self, category: int) -> float:
        return self.hourly_rate[category]

    def violations(self) -> list[str]:
        out = []
        if len(self.hourly_rate) != N_CATEGORIES:
            out.append(f"hourly_rate needs {N_CATEGORIES} entries")
        if any(r < 0 for r in self.hourly_rate):
            out.append("rates must be non-negative")
        if any(s <= 0 for s in self.speed_std_kmh):
            out.append("speed stds must be positive")
        if any(m <= self.speed_min_kmh for m in self.speed_mean_kmh):
            out.append("speed means must exceed the truncation floor")
        if self.min_headway < 0:
            out.append("min_headway must be non-negative")
        return out


def default_bridge() -> BridgeModel:
    return BridgeModel()


def default_traffic() -> TrafficModel:
    return TrafficModel()


def _truncated_normal(rng: np.random.Generator, mean, std, floor, size) -> np.ndarray:
    """Rejection-sample a normal truncated below at ``floor``."""
    out = rng.normal(mean, std, size=size)
    bad = out <= floor
    while np.any(bad):
        out[bad] = rng.normal(mean, std, size=int(bad.sum()))
        bad = out <= floor
    return out


def _class_index(cls: VehicleClass) -> int:
    return 0 if cls is VehicleClass.LIGHT else 1


def sample_traffic(
    model: TrafficModel,
    duration: float,
    seed: int,
    plane_length: float = 25.0,
    t0: float = 0.0,
) -> list[VehicleEvent]:
    """Draw one scenario of vehicle events over ``[t0, t0 + duration)``.

    Hour chunks are sampled independently with seeds derived from
    (seed, chunk index); same-lane arrivals closer than the minimum headway
    are thinned (later vehicle dropped), across chunk boundaries too.
    """
    problems = model.violations()
    if problems:
        raise ValueError("; ".join(problems))
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    n_chunks = int(math.ceil(duration / CHUNK_SECONDS))
    draft = []  # (t_entry, category, speed)
    for chunk in range(n_chunks):
        rng = np.random.default_rng([seed, chunk])
        c0 = t0 + chunk * CHUNK_SECONDS
        c1 = min(t0 + duration, c0 + CHUNK_SECONDS)
        hours = (c1 - c0) / 3600.0
        for cat in range(N_CATEGORIES):
            cls, _ = category_pair(cat)
            n = rng.poisson(model.hourly_rate[cat] * hours)
            if n == 0:
                continue
            entries = np.sort(rng.uniform(c0, c1, size=n))
            speeds = _truncated_normal(
                rng,
                model.speed_mean_kmh[_class_index(cls)],
                model.speed_std_kmh[_class_index(cls)],
                model.speed_min_kmh,
                n,
            )
            draft.extend(zip(entries, [cat] * n, speeds))
    draft.sort(key=lambda rec: (rec[0], rec[1]))

    events = []
    last_entry = {LaneId.LEFT_OVERTAKING: -math.inf, LaneId.RIGHT_SLOW: -math.inf}
    for t_entry, cat, speed in draft:
        cls, lane = category_pair(cat)
        if t_entry - last_entry[lane] < model.min_headway:
            continue
        last_entry[lane] = t_entry
        dwell = plane_length / (speed / 3.6)
        events.append(
            VehicleEvent(
                event_id=len(events) + 1,
                vehicle_class=cls,
                lane=lane,
                speed_kmh=float(speed),
                t_entry=float(t_entry),
                t_exit=float(t_entry + dwell),
                axle_count=DEFAULT_AXLES[cls],
            )
        )
    return events


def _event_weight(event: VehicleEvent, weights: Optional[dict]) -> float:
    table = DEFAULT_CLASS_WEIGHT_TONNES if weights is None else weights
    return table[event.vehicle_class]


def strain_response(
    event: VehicleEvent,
    node: int,
    bridge: BridgeModel,
    times: np.ndarray,
    weights: Optional[dict] = None,
) -> np.ndarray:
    """Quasi-static strain contribution on ``times`` (absolute seconds):
    weight x coupling x triangular influence line peaking when the load
    passes the node ordinate, zero outside the crossing interval."""
    t = np.asarray(times, dtype=np.float64)
    out = np.zeros_like(t)
    v = event.speed_kmh / 3.6
    mask = (t >= event.t_entry) & (t <= event.t_exit)
    if not np.any(mask):
        return out
    y = v * (t[mask] - event.t_entry)
    half = bridge.span / 2.0
    influence = np.clip(1.0 - np.abs(y - bridge.node_y[node]) / half, 0.0, None)
    amp = bridge.strain_gain * _event_weight(event, weights) * bridge.coupling_gain(
        event.lane, node
    )
    out[mask] = amp * influence
    return out


def accel_response(
    event: VehicleEvent,
    node: int,
    bridge: BridgeModel,
    times: np.ndarray,
    weights: Optional[dict] = None,
) -> np.ndarray:
    """Dynamic ring-down on ``times``: a damped sinusoid
    exp(-zeta*omega*(t - t_p)) * sin(omega_d*(t - t_p)) excited at the
    node-passage time t_p, amplitude proportional to weight x speed x
    coupling."""
    t = np.asarray(times, dtype=np.float64)
    out = np.zeros_like(t)
    v = event.speed_kmh / 3.6
    t_pass = event.t_entry + bridge.node_y[node] / v
    omega = 2.0 * math.pi * bridge.modal_freq[node]
    zeta = bridge.damping_ratio
    omega_d = omega * math.sqrt(1.0 - zeta * zeta)
    mask = t >= t_pass
    if not np.any(mask):
        return out
    tau = t[mask] - t_pass
    amp = (
        bridge.accel_gain
        * _event_weight(event, weights)
        * v
        * bridge.coupling_gain(event.lane, node)
    )
    out[mask] = amp * np.exp(-zeta * omega * tau) * np.sin(omega_d * tau)
    return out


def _ringdown_tail_seconds(bridge: BridgeModel) -> float:
    """Time for the slowest node's envelope to fall below 1e-9 of its peak,
    after which an event's contribution is treated as zero."""
    slowest = min(bridge.modal_freq)
    return math.log(1e9) / (bridge.damping_ratio * 2.0 * math.pi * slowest)


def _render_block(
    events: Sequence[VehicleEvent],
    bridge: BridgeModel,
    rate: float,
    t_start: float,
    n_samples: int,
    modality: SensorModality,
    rng: np.random.Generator,
    noise_std: float,
    weights: Optional[dict],
) -> np.ndarray:
    """One [n_nodes x n_samples] block of superposed responses plus noise."""
    block = np.zeros((bridge.n_nodes, n_samples))
    t_end = t_start + n_samples / rate
    tail = _ringdown_tail_seconds(bridge) if modality is SensorModality.ACCELERATION else 0.0
    for event in events:
        if event.t_entry >= t_end or event.t_exit + tail <= t_start:
            continue
        # Evaluate only on the sample range the event can touch.
        i0 = max(0, int(math.floor((event.t_entry - t_start) * rate)))
        i1 = min(n_samples, int(math.ceil((event.t_exit + tail - t_start) * rate)) + 1)
        if i0 >= i1:
            continue
        times = t_start + np.arange(i0, i1) / rate
        for node in range(bridge.n_nodes):
            if modality is SensorModality.ACCELERATION:
                block[node, i0:i1] += accel_response(event, node, bridge, times, weights)
            else:
                block[node, i0:i1] += strain_response(event, node, bridge, times, weights)
    if noise_std > 0:
        block += rng.normal(0.0, noise_std, size=block.shape)
    return block


def iter_render_chunks(
    events: Sequence[VehicleEvent],
    bridge: BridgeModel,
    duration: float,
    seed: int,
    rate_accel: float = RATE_ACCELERATION,
    rate_strain: float = RATE_STRAIN,
    t0: float = 0.0,
    weights: Optional[dict] = None,
    modalities: Sequence[SensorModality] = (
        SensorModality.ACCELERATION,
        SensorModality.STRAIN,
    ),
) -> Iterator[tuple[int, float, dict[SensorModality, np.ndarray]]]:
    """Yield (chunk index, chunk t0, {modality: [n_nodes x n] block}) hour by
    hour. Chunks are independent: noise uses a seed derived from (seed,
    modality, chunk), and deterministic responses are functions of absolute
    time, so concatenation equals a single full render."""
    problems = bridge.violations()
    if problems:
        raise ValueError("; ".join(problems))
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    rates = {SensorModality.ACCELERATION: rate_accel, SensorModality.STRAIN: rate_strain}
    noise = {
        SensorModality.ACCELERATION: bridge.noise_std_accel,
        SensorModality.STRAIN: bridge.noise_std_strain,
    }
    n_chunks = int(math.ceil(duration / CHUNK_SECONDS))
    for chunk in range(n_chunks):
        c0 = t0 + chunk * CHUNK_SECONDS
        seconds = min(duration - chunk * CHUNK_SECONDS, CHUNK_SECONDS)
        blocks = {}
        for m_idx, modality in enumerate(modalities):
            rate = rates[modality]
            n = int(round(seconds * rate))
            rng = np.random.default_rng([seed, 1000 + m_idx, chunk])
            blocks[modality] = _render_block(
                events, bridge, rate, c0, n, modality, rng, noise[modality], weights
            )
        yield chunk, c0, blocks


def render_signals(
    events: Sequence[VehicleEvent],
    bridge: BridgeModel,
    duration: float,
    seed: int,
    rate_accel: float = RATE_ACCELERATION,
    rate_strain: float = RATE_STRAIN,
    t0: float = 0.0,
    weights: Optional[dict] = None,
) -> tuple[list[SignalRecord], list[SignalRecord]]:
    """Full in-memory render: per-node (acceleration, strain) record lists.

    Sensor ids are 1..n_nodes within each modality, matching node order.
    """
    parts: dict[SensorModality, list[np.ndarray]] = {
        SensorModality.ACCELERATION: [],
        SensorModality.STRAIN: [],
    }
    for _, _, blocks in iter_render_chunks(
        events, bridge, duration, seed, rate_accel, rate_strain, t0, weights
    ):
        for modality, block in blocks.items():
            parts[modality].append(block)
    out = {}
    for modality, rate in (
        (SensorModality.ACCELERATION, rate_accel),
        (SensorModality.STRAIN, rate_strain),
    ):
        full = np.concatenate(parts[modality], axis=1)
        out[modality] = [
            SignalRecord(node + 1, modality, rate, t0, full[node])
            for node in range(bridge.n_nodes)
        ]
    return out[SensorModality.ACCELERATION], out[SensorModality.STRAIN]
