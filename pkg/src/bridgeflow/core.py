"""Shared domain types: sensors, vehicles, windows and dataset partitioning.

Every record type carries a ``violations()`` method returning an explicit
list of invariant breaches (empty list = valid), so callers can validate
without try/except pyrotechnics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "BridgeflowError",
    "EmptyPartition",
    "FileMissing",
    "SchemaMismatch",
    "SensorModality",
    "VehicleClass",
    "LaneId",
    "N_CATEGORIES",
    "CATEGORY_NAMES",
    "TrafficCategory",
    "category_index",
    "category_pair",
    "VehicleEvent",
    "SignalRecord",
    "WindowSample",
    "ModelGraph",
    "grid_graph",
    "split_by_time",
    "random_split",
]


class BridgeflowError(Exception):
    """Base class for package errors."""


class FileMissing(BridgeflowError):
    """A referenced input file does not exist; the message names the path."""


class SchemaMismatch(BridgeflowError):
    """Artifacts disagree on structure or provenance (e.g. a dataset and a
    checkpoint built with different preprocessing configurations)."""


class EmptyPartition(BridgeflowError):
    """A dataset split left one side empty."""


class SensorModality(Enum):
    ACCELERATION = "acceleration"
    STRAIN = "strain"


class VehicleClass(Enum):
    LIGHT = "light"
    HEAVY = "heavy"


class LaneId(Enum):
    """Carriageway lanes: the slow lane is on the right girder side."""

    LEFT_OVERTAKING = "left"
    RIGHT_SLOW = "right"


N_CATEGORIES = 4

#: Canonical (class, lane) -> output index order shared by labels, model
#: heads, hourly count columns and metric rows.
_CATEGORY_ORDER: tuple[tuple[VehicleClass, LaneId], ...] = (
    (VehicleClass.LIGHT, LaneId.RIGHT_SLOW),
    (VehicleClass.LIGHT, LaneId.LEFT_OVERTAKING),
    (VehicleClass.HEAVY, LaneId.RIGHT_SLOW),
    (VehicleClass.HEAVY, LaneId.LEFT_OVERTAKING),
)

CATEGORY_NAMES: tuple[str, ...] = (
    "light_right",
    "light_left",
    "heavy_right",
    "heavy_left",
)


def category_index(vehicle_class: VehicleClass, lane: LaneId) -> int:
    """Map a (class, lane) pair to its canonical output index (0..3)."""
    return _CATEGORY_ORDER.index((vehicle_class, lane))


def category_pair(index: int) -> tuple[VehicleClass, LaneId]:
    """Inverse of :func:`category_index`."""
    if not 0 <= index < N_CATEGORIES:
        raise ValueError(f"category index out of range: {index}")
    return _CATEGORY_ORDER[index]


@dataclass(frozen=True)
class TrafficCategory:
    """A (vehicle class, lane) pair with its canonical index."""

    vehicle_class: VehicleClass
    lane: LaneId
    index: int

    @classmethod
    def from_pair(cls, vehicle_class: VehicleClass, lane: LaneId) -> "TrafficCategory":
        return cls(vehicle_class, lane, category_index(vehicle_class, lane))

    @property
    def name(self) -> str:
        return CATEGORY_NAMES[self.index]

    def violations(self) -> list[str]:
        out = []
        if not 0 <= self.index < N_CATEGORIES:
            out.append(f"index {self.index} outside 0..{N_CATEGORIES - 1}")
        elif _CATEGORY_ORDER[self.index] != (self.vehicle_class, self.lane):
            out.append(
                f"index {self.index} does not match pair "
                f"({self.vehicle_class.value}, {self.lane.value})"
            )
        return out


@dataclass(frozen=True)
class VehicleEvent:
    """One vehicle crossing the sensor plane.

    Times are entry/exit of the instrumented plane in seconds on the common
    run clock; ``axle_count`` is optional metadata (None when the upstream
    source provides no axle information).
    """

    event_id: int
    vehicle_class: VehicleClass
    lane: LaneId
    speed_kmh: float
    t_entry: float
    t_exit: float
    axle_count: Optional[int] = None

    @property
    def dwell(self) -> float:
        return self.t_exit - self.t_entry

    @property
    def category(self) -> int:
        return category_index(self.vehicle_class, self.lane)

    def violations(self, plane_length: Optional[float] = None) -> list[str]:
        out = []
        if not math.isfinite(self.speed_kmh) or self.speed_kmh <= 0:
            out.append(f"speed must be positive and finite, got {self.speed_kmh}")
        if not (math.isfinite(self.t_entry) and math.isfinite(self.t_exit)):
            out.append("entry/exit times must be finite")
        elif self.t_exit <= self.t_entry:
            out.append(f"t_exit {self.t_exit} must exceed t_entry {self.t_entry}")
        if self.axle_count is not None and self.axle_count < 1:
            out.append(f"axle_count must be >= 1 when present, got {self.axle_count}")
        if plane_length is not None and self.speed_kmh > 0 and self.t_exit > self.t_entry:
            expected = plane_length / (self.speed_kmh / 3.6)
            if not math.isclose(self.dwell, expected, rel_tol=0.2):
                out.append(
                    f"dwell {self.dwell:.4f}s deviates more than 20% from "
                    f"plane_length/speed = {expected:.4f}s"
                )
        return out


def _as_readonly_f64(values, ndim: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-d, got shape {arr.shape}")
    arr = arr.copy() if arr.flags.writeable else arr
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SignalRecord:
    """Uniformly sampled time series from one sensor channel.

    Samples are stored as a read-only float64 array; records are treated as
    immutable values so pipeline stages always return fresh records.
    """

    sensor_id: int
    modality: SensorModality
    sample_rate: float
    t0: float
    samples: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "samples", _as_readonly_f64(self.samples, 1, "samples")
        )

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_samples) / self.sample_rate

    def with_samples(
        self, samples: np.ndarray, sample_rate: Optional[float] = None
    ) -> "SignalRecord":
        return replace(
            self,
            samples=samples,
            sample_rate=self.sample_rate if sample_rate is None else sample_rate,
        )

    def violations(self) -> list[str]:
        out = []
        if self.sensor_id < 1:
            out.append(f"sensor_id must be >= 1, got {self.sensor_id}")
        if not (math.isfinite(self.sample_rate) and self.sample_rate > 0):
            out.append(f"sample_rate must be positive, got {self.sample_rate}")
        if not math.isfinite(self.t0):
            out.append(f"t0 must be finite, got {self.t0}")
        if self.n_samples == 0:
            out.append("samples must be non-empty")
        elif not np.all(np.isfinite(self.samples)):
            out.append("samples contain non-finite values")
        return out


@dataclass(frozen=True)
class WindowSample:
    """One fixed-length analysis window: tensor [n_nodes, n_channels, n_steps]
    plus its fractional per-category label vector (length 4)."""

    start_time: float
    tensor: np.ndarray
    label: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "tensor", _as_readonly_f64(self.tensor, 3, "tensor"))
        object.__setattr__(self, "label", _as_readonly_f64(self.label, 1, "label"))

    @property
    def n_nodes(self) -> int:
        return int(self.tensor.shape[0])

    @property
    def n_channels(self) -> int:
        return int(self.tensor.shape[1])

    @property
    def n_steps(self) -> int:
        return int(self.tensor.shape[2])

    def violations(
        self,
        window_seconds: Optional[float] = None,
        sample_rate: Optional[float] = None,
    ) -> list[str]:
        out = []
        if not np.all(np.isfinite(self.tensor)):
            out.append("tensor contains non-finite values")
        if self.label.shape != (N_CATEGORIES,):
            out.append(f"label must have shape ({N_CATEGORIES},), got {self.label.shape}")
        elif not np.all(np.isfinite(self.label)) or np.any(self.label < 0):
            out.append("label entries must be finite and non-negative")
        if window_seconds is not None and sample_rate is not None:
            expected = int(round(window_seconds * sample_rate))
            if self.n_steps != expected:
                out.append(f"tensor has {self.n_steps} steps, expected {expected}")
        return out


@dataclass(frozen=True)
class ModelGraph:
    """Directed sensor-network graph: edges are ordered (src, dst) pairs.

    ``self_loops`` controls whether each node additionally attends to itself
    during message passing.
    """

    n_nodes: int
    edges: frozenset[tuple[int, int]]
    self_loops: bool = True

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Deterministically ordered (src, dst) index arrays, with self loops
        appended when enabled."""
        pairs = sorted(self.edges)
        if self.self_loops:
            pairs += [(i, i) for i in range(self.n_nodes)]
        pairs.sort(key=lambda p: (p[1], p[0]))
        if not pairs:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        src, dst = zip(*pairs)
        return np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64)

    def violations(self) -> list[str]:
        out = []
        if self.n_nodes < 1:
            out.append(f"n_nodes must be >= 1, got {self.n_nodes}")
            return out
        for s, d in sorted(self.edges):
            if not (0 <= s < self.n_nodes and 0 <= d < self.n_nodes):
                out.append(f"edge ({s}, {d}) references a node outside 0..{self.n_nodes - 1}")
        # Reachability: with self loops counted, every node must sit in one
        # connected component of the undirected edge view.
        adj = [set() for _ in range(self.n_nodes)]
        for s, d in self.edges:
            if 0 <= s < self.n_nodes and 0 <= d < self.n_nodes:
                adj[s].add(d)
                adj[d].add(s)
        if self.n_nodes > 1:
            seen = {0}
            stack = [0]
            while stack:
                for nxt in adj[stack.pop()]:
                    if nxt not in seen:
                        seen.add(nxt)
                        stack.append(nxt)
            unreachable = sorted(set(range(self.n_nodes)) - seen)
            if unreachable:
                out.append(f"nodes not reachable through the edge set: {unreachable}")
        return out


def grid_graph(n_stations: int = 4, n_lines: int = 2, self_loops: bool = True) -> ModelGraph:
    """Default sensor topology: ``n_lines`` girder lines ×  ``n_stations``
    longitudinal stations, bidirectional edges along and across lines.

    Node index = line * n_stations + station.
    """
    edges: set[tuple[int, int]] = set()
    for line in range(n_lines):
        for st in range(n_stations):
            node = line * n_stations + st
            if st + 1 < n_stations:
                edges.add((node, node + 1))
                edges.add((node + 1, node))
            if line + 1 < n_lines:
                other = (line + 1) * n_stations + st
                edges.add((node, other))
                edges.add((other, node))
    return ModelGraph(n_nodes=n_lines * n_stations, edges=frozenset(edges), self_loops=self_loops)


def split_by_time(
    samples: Sequence[WindowSample], boundary: float
) -> tuple[list[WindowSample], list[WindowSample]]:
    """Partition windows at a time boundary: start_time < boundary goes to the
    first (train/val) side, the rest to the second (test) side.

    Raises :class:`EmptyPartition` when either side ends up empty.
    """
    first = [s for s in samples if s.start_time < boundary]
    second = [s for s in samples if s.start_time >= boundary]
    if not first or not second:
        raise EmptyPartition(
            f"time split at {boundary} left {len(first)} / {len(second)} samples"
        )
    return first, second


def random_split(
    samples: Sequence, ratio: float = 0.8, seed: int = 0
) -> tuple[list, list]:
    """Deterministic shuffled split: round(ratio * n) samples in the first part.

    Both parts preserve the original ordering of ``samples``.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    n = len(samples)
    n_first = int(round(ratio * n))
    if n_first == 0 or n_first == n:
        raise EmptyPartition(f"ratio {ratio} with {n} samples leaves an empty part")
    picks = np.random.default_rng(seed).permutation(n)[:n_first]
    chosen = np.zeros(n, dtype=bool)
    chosen[picks] = True
    first = [samples[i] for i in range(n) if chosen[i]]
    second = [samples[i] for i in range(n) if not chosen[i]]
    return first, second
