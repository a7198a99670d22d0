"""Camera-plane geometry and label generation.

A planar homography (solved by the direct linear transform on >= 4 control
points) maps road-plane coordinates to pixels and back. Pixel tracks become
vehicle events: class by majority vote, speed by a least-squares line fit on
the longitudinal coordinate, entry/exit by extrapolating that line to the
plane edges, then a time shift onto the sensor plane. Events finally turn
into fractional per-window count labels.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (
    BridgeflowError,
    LaneId,
    N_CATEGORIES,
    VehicleClass,
    VehicleEvent,
    category_index,
)

__all__ = [
    "TooFewPoints",
    "DegenerateConfiguration",
    "PointAtInfinity",
    "InsufficientTrack",
    "ZeroDwell",
    "PixelPoint",
    "WorldPoint",
    "ControlPoint",
    "HomographyMatrix",
    "PlaneSpec",
    "TrackFrame",
    "Track",
    "solve_homography",
    "project_to_pixel",
    "project_to_world",
    "majority_vote_class",
    "estimate_speed",
    "entry_exit_times",
    "synchronize_event",
    "relabel_by_axles",
    "assign_fractional_labels",
    "lane_from_offset",
    "track_to_event",
    "events_from_tracks",
    "read_control_points",
    "read_tracks",
    "write_homography",
    "read_homography",
]


class TooFewPoints(BridgeflowError):
    """Homography estimation needs at least four correspondences."""


class DegenerateConfiguration(BridgeflowError):
    """Control points do not constrain a full-rank homography."""


class PointAtInfinity(BridgeflowError):
    """Projection produced a vanishing homogeneous scale."""


class InsufficientTrack(BridgeflowError):
    """Track does not support the requested kinematic estimate."""


class ZeroDwell(BridgeflowError):
    """Event entry and exit times coincide."""


@dataclass(frozen=True)
class PixelPoint:
    px: float
    py: float


@dataclass(frozen=True)
class WorldPoint:
    """Road-plane coordinates: x lateral (lane offset), y longitudinal
    (travel direction), both in metres."""

    x: float
    y: float


@dataclass(frozen=True)
class ControlPoint:
    pixel: PixelPoint
    world: WorldPoint


@dataclass(frozen=True)
class PlaneSpec:
    """Observed road plane: longitudinal length, per-lane lateral bounds and
    the longitudinal offset from the camera plane to the sensor plane
    (camera is downstream of the sensors)."""

    length: float = 25.0
    lane_bounds: tuple[tuple[float, float], ...] = ((0.0, 3.6), (3.6, 7.2))
    lane_order: tuple[LaneId, ...] = (LaneId.LEFT_OVERTAKING, LaneId.RIGHT_SLOW)
    offset_to_sensors: float = 35.0

    def violations(self) -> list[str]:
        out = []
        if self.length <= 0:
            out.append(f"length must be positive, got {self.length}")
        if len(self.lane_bounds) != len(self.lane_order):
            out.append("lane_bounds and lane_order must have equal length")
        for lo, hi in self.lane_bounds:
            if hi <= lo:
                out.append(f"lane bound ({lo}, {hi}) is empty")
        for (lo1, hi1), (lo2, hi2) in zip(self.lane_bounds, self.lane_bounds[1:]):
            if lo2 < hi1:
                out.append("lane bounds overlap")
        return out


@dataclass(frozen=True)
class TrackFrame:
    t: float
    pixel: PixelPoint
    class_vote: VehicleClass


@dataclass(frozen=True)
class Track:
    """Pixel-space detection track for one vehicle."""

    track_id: int
    frames: tuple[TrackFrame, ...]
    lane: Optional[LaneId] = None

    def violations(self) -> list[str]:
        out = []
        if len(self.frames) < 2:
            out.append(f"track needs >= 2 frames for kinematics, got {len(self.frames)}")
        times = [f.t for f in self.frames]
        if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
            out.append("frame times must be strictly increasing")
        return out


@dataclass(frozen=True)
class HomographyMatrix:
    """3x3 projective map world -> pixel, stored with the scale convention
    a33 = 1 (or unit Frobenius norm when a33 ~ 0)."""

    a: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.a, dtype=np.float64)
        if arr.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {arr.shape}")
        arr = _normalize_scale(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "a", arr)

    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.a)

    def violations(self) -> list[str]:
        out = []
        if not np.all(np.isfinite(self.a)):
            out.append("entries must be finite")
            return out
        if abs(np.linalg.det(self.a)) < 1e-12:
            out.append("matrix is singular")
        return out


def _normalize_scale(a: np.ndarray) -> np.ndarray:
    if abs(a[2, 2]) > 1e-9:
        return a / a[2, 2]
    norm = np.linalg.norm(a)
    if norm == 0:
        raise DegenerateConfiguration("zero homography")
    return a / norm


def _hartley_normalization(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity transform moving the centroid to the origin and the mean
    distance from it to sqrt(2). Returns (T, transformed points)."""
    centroid = points.mean(axis=0)
    dists = np.linalg.norm(points - centroid, axis=1)
    mean_dist = dists.mean()
    if mean_dist < 1e-12:
        raise DegenerateConfiguration("control points are coincident")
    s = math.sqrt(2.0) / mean_dist
    T = np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )
    homog = np.column_stack([points, np.ones(len(points))])
    normed = (T @ homog.T).T
    return T, normed[:, :2]


def solve_homography(points: Sequence[ControlPoint]) -> HomographyMatrix:
    """Direct linear transform with Hartley point normalization.

    Builds the 2n x 9 homogeneous design matrix from the correspondences,
    takes the right singular vector of the smallest singular value, and
    undoes the normalization. Raises :class:`TooFewPoints` for n < 4 and
    :class:`DegenerateConfiguration` when the system has rank < 8 (e.g. too
    many collinear points).
    """
    if len(points) < 4:
        raise TooFewPoints(f"homography needs >= 4 points, got {len(points)}")
    world = np.array([[cp.world.x, cp.world.y] for cp in points], dtype=np.float64)
    pixel = np.array([[cp.pixel.px, cp.pixel.py] for cp in points], dtype=np.float64)
    t_world, world_n = _hartley_normalization(world)
    t_pixel, pixel_n = _hartley_normalization(pixel)

    rows = []
    for (wx, wy), (px, py) in zip(world_n, pixel_n):
        rows.append([0.0, 0.0, 0.0, -wx, -wy, -1.0, py * wx, py * wy, py])
        rows.append([wx, wy, 1.0, 0.0, 0.0, 0.0, -px * wx, -px * wy, -px])
    design = np.asarray(rows)

    _, singular, vt = np.linalg.svd(design)
    if singular[7] <= 1e-8 * singular[0]:
        raise DegenerateConfiguration(
            "design matrix rank < 8 (collinear or coincident control points)"
        )
    h_normed = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_pixel) @ h_normed @ t_world
    return HomographyMatrix(h)


def _project(a: np.ndarray, x: float, y: float) -> tuple[float, float]:
    v = a @ np.array([x, y, 1.0])
    if abs(v[2]) < 1e-12:
        raise PointAtInfinity(f"projection of ({x}, {y}) has vanishing scale")
    return float(v[0] / v[2]), float(v[1] / v[2])


def project_to_pixel(h: HomographyMatrix, point: WorldPoint) -> PixelPoint:
    px, py = _project(h.a, point.x, point.y)
    return PixelPoint(px, py)


def project_to_world(h: HomographyMatrix, point: PixelPoint) -> WorldPoint:
    x, y = _project(h.inverse(), point.px, point.py)
    return WorldPoint(x, y)


def majority_vote_class(track: Track) -> VehicleClass:
    """Most frequent per-frame class vote; ties resolve to HEAVY (the rarer,
    higher-impact class)."""
    if not track.frames:
        raise InsufficientTrack(f"track {track.track_id} has no frames")
    counts = Counter(f.class_vote for f in track.frames)
    n_heavy = counts.get(VehicleClass.HEAVY, 0)
    n_light = counts.get(VehicleClass.LIGHT, 0)
    return VehicleClass.HEAVY if n_heavy >= n_light else VehicleClass.LIGHT


def _interpolate_dropped_frames(
    times: np.ndarray, values: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild a uniform frame grid when gaps are integer multiples of the
    base frame interval, filling gaps linearly; otherwise return unchanged."""
    steps = np.diff(times)
    base = steps.min()
    if base <= 0:
        raise InsufficientTrack("frame times must be strictly increasing")
    multiples = steps / base
    if not np.allclose(multiples, np.round(multiples), rtol=0, atol=1e-6):
        return times, values
    grid = times[0] + base * np.arange(int(round((times[-1] - times[0]) / base)) + 1)
    return grid, np.interp(grid, times, values)


def _fit_longitudinal_motion(
    world_track: Sequence[tuple[float, WorldPoint]],
) -> tuple[float, float]:
    """Least-squares line y(t) = v*t + c on the longitudinal coordinate,
    after linear interpolation of dropped frames. Returns (v [m/s], c)."""
    if len(world_track) < 2:
        raise InsufficientTrack(f"need >= 2 frames, got {len(world_track)}")
    times = np.asarray([t for t, _ in world_track], dtype=np.float64)
    ys = np.asarray([p.y for _, p in world_track], dtype=np.float64)
    times, ys = _interpolate_dropped_frames(times, ys)
    t_c = times - times.mean()
    y_c = ys - ys.mean()
    denom = float(t_c @ t_c)
    if denom <= 0:
        raise InsufficientTrack("frame times carry no spread")
    v = float(t_c @ y_c) / denom
    c = float(ys.mean() - v * times.mean())
    return v, c


def estimate_speed(world_track: Sequence[tuple[float, WorldPoint]]) -> float:
    """Speed in km/h from the longitudinal line fit (0 for a stationary track)."""
    v, _ = _fit_longitudinal_motion(world_track)
    return abs(v) * 3.6


def entry_exit_times(
    world_track: Sequence[tuple[float, WorldPoint]], plane: PlaneSpec
) -> tuple[float, float]:
    """Times at which the fitted motion crosses y = 0 and y = plane.length."""
    v, c = _fit_longitudinal_motion(world_track)
    if v <= 1e-12:
        raise InsufficientTrack(
            f"non-positive longitudinal speed {v:.3e} m/s; cannot extrapolate"
        )
    t_entry = (0.0 - c) / v
    t_exit = (plane.length - c) / v
    return t_entry, t_exit


def synchronize_event(event: VehicleEvent, plane: PlaneSpec) -> VehicleEvent:
    """Shift camera-plane times onto the sensor plane. The camera is
    ``offset_to_sensors`` downstream, so sensor-plane times precede camera
    times by offset/speed."""
    if event.speed_kmh <= 0:
        raise ValueError(f"event {event.event_id}: speed must be positive")
    shift = -plane.offset_to_sensors / (event.speed_kmh / 3.6)
    return replace(event, t_entry=event.t_entry + shift, t_exit=event.t_exit + shift)


def relabel_by_axles(event: VehicleEvent) -> VehicleEvent:
    """Axle-count override: < 3 axles -> LIGHT, >= 3 -> HEAVY, absent ->
    class unchanged."""
    if event.axle_count is None:
        return event
    cls = VehicleClass.LIGHT if event.axle_count < 3 else VehicleClass.HEAVY
    return replace(event, vehicle_class=cls)


def lane_from_offset(lateral: float, plane: PlaneSpec) -> Optional[LaneId]:
    """Lane whose lateral bounds contain the offset, or None when outside."""
    for lane, (lo, hi) in zip(plane.lane_order, plane.lane_bounds):
        if lo <= lateral < hi:
            return lane
    return None


def track_to_event(
    track: Track, h: HomographyMatrix, plane: PlaneSpec
) -> Optional[VehicleEvent]:
    """Convert one pixel track to a camera-plane event; None when the track
    is unusable (outside the lanes, too short, or not moving forward)."""
    world = []
    for frame in track.frames:
        try:
            world.append((frame.t, project_to_world(h, frame.pixel)))
        except PointAtInfinity:
            continue
    if len(world) < 2:
        return None
    lane = lane_from_offset(float(np.median([p.x for _, p in world])), plane)
    if lane is None:
        return None
    try:
        speed_kmh = estimate_speed(world)
        t_entry, t_exit = entry_exit_times(world, plane)
    except InsufficientTrack:
        return None
    if speed_kmh <= 0:
        return None
    return VehicleEvent(
        event_id=track.track_id,
        vehicle_class=majority_vote_class(track),
        lane=lane,
        speed_kmh=speed_kmh,
        t_entry=t_entry,
        t_exit=t_exit,
        axle_count=None,
    )


def events_from_tracks(
    tracks: Iterable[Track], h: HomographyMatrix, plane: PlaneSpec
) -> tuple[list[VehicleEvent], int]:
    """All usable tracks as sensor-plane events (synchronized), plus the
    number of discarded tracks."""
    events = []
    dropped = 0
    for track in tracks:
        event = track_to_event(track, h, plane)
        if event is None:
            dropped += 1
            continue
        events.append(synchronize_event(event, plane))
    return events, dropped


def assign_fractional_labels(
    events: Iterable[VehicleEvent],
    window_start: float,
    window_seconds: float,
    stride: float,
    n_windows: int,
) -> np.ndarray:
    """Fractional per-window count labels [n_windows x 4].

    Each event contributes overlap([t_entry, t_exit], window) / dwell to a
    window, so summing any set of windows that tile an event's dwell once
    recovers exactly one count.
    """
    if window_seconds <= 0 or stride <= 0:
        raise ValueError("window_seconds and stride must be positive")
    labels = np.zeros((n_windows, N_CATEGORIES), dtype=np.float64)
    for event in events:
        dwell = event.t_exit - event.t_entry
        if dwell <= 0:
            raise ZeroDwell(f"event {event.event_id} has non-positive dwell {dwell}")
        cat = event.category
        k_lo = max(0, math.floor((event.t_entry - window_start - window_seconds) / stride) + 1)
        k_hi = min(n_windows - 1, math.floor((event.t_exit - window_start) / stride))
        for k in range(k_lo, k_hi + 1):
            w0 = window_start + k * stride
            overlap = min(event.t_exit, w0 + window_seconds) - max(event.t_entry, w0)
            if overlap > 0:
                labels[k, cat] += overlap / dwell
    return labels


# ---------------------------------------------------------------------------
# file interfaces


def read_control_points(path: str | Path) -> list[ControlPoint]:
    """CSV with header ``px,py,Xw,Yw``: pixel and world plane coordinates."""
    from .io import SchemaError

    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "px,py,Xw,Yw":
            raise SchemaError(f"{path}: expected header 'px,py,Xw,Yw', got {header!r}")
        points = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != 4:
                raise SchemaError(f"{path}:{lineno}: expected 4 columns")
            px, py, xw, yw = (float(c) for c in cells)
            points.append(ControlPoint(PixelPoint(px, py), WorldPoint(xw, yw)))
    return points


def read_tracks(path: str | Path) -> list[Track]:
    """JSON lines ``{"id", "t", "px", "py", "class"}`` grouped into tracks,
    frames sorted by time."""
    from .io import SchemaError

    frames: dict[int, list[TrackFrame]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                frames.setdefault(int(rec["id"]), []).append(
                    TrackFrame(
                        t=float(rec["t"]),
                        pixel=PixelPoint(float(rec["px"]), float(rec["py"])),
                        class_vote=VehicleClass(rec["class"]),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise SchemaError(f"{path}:{lineno}: bad track record: {exc}") from exc
    return [
        Track(track_id=tid, frames=tuple(sorted(batch, key=lambda f: f.t)))
        for tid, batch in sorted(frames.items())
    ]


def write_homography(path: str | Path, h: HomographyMatrix) -> None:
    from .io import write_json

    write_json(path, {"a": [[float(v) for v in row] for row in h.a]})


def read_homography(path: str | Path) -> HomographyMatrix:
    from .io import SchemaError, read_json

    rec = read_json(path)
    if "a" not in rec:
        raise SchemaError(f"{path}: missing homography matrix key 'a'")
    return HomographyMatrix(np.asarray(rec["a"], dtype=np.float64))
