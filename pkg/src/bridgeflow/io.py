"""File formats: event JSON lines, signal CSV, binary signal shards,
array bundles (datasets / checkpoints) and run manifests.

All writers are deterministic — identical inputs produce identical bytes —
so artifacts can be content-hashed and reruns compared byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (
    BridgeflowError,
    LaneId,
    SensorModality,
    SignalRecord,
    VehicleClass,
    VehicleEvent,
)

__all__ = [
    "SchemaError",
    "read_events",
    "write_events",
    "read_signals_csv",
    "write_signals_csv",
    "read_shard_header",
    "read_signal_shard",
    "write_signal_shard",
    "write_bundle",
    "read_bundle",
    "sha256_file",
    "canonical_json",
    "config_hash",
    "write_json",
    "read_json",
    "hour_start_iso",
    "iso_to_seconds",
    "write_hourly_csv",
    "read_hourly_csv",
]

SHARD_MAGIC = b"BFSG"
SHARD_VERSION = 1
_SHARD_HEADER = struct.Struct("<4sHHddQ")  # magic, version, n_sensors, rate, t0, n_samples


class SchemaError(BridgeflowError):
    """A file failed structural validation."""


# ---------------------------------------------------------------------------
# vehicle events (JSON lines)


def write_events(path: str | Path, events: Iterable[VehicleEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(
                json.dumps(
                    {
                        "id": ev.event_id,
                        "class": ev.vehicle_class.value,
                        "lane": ev.lane.value,
                        "speed_kmh": ev.speed_kmh,
                        "t_entry": ev.t_entry,
                        "t_exit": ev.t_exit,
                        "axles": ev.axle_count,
                    }
                )
            )
            fh.write("\n")


def read_events(path: str | Path) -> list[VehicleEvent]:
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                events.append(
                    VehicleEvent(
                        event_id=int(rec["id"]),
                        vehicle_class=VehicleClass(rec["class"]),
                        lane=LaneId(rec["lane"]),
                        speed_kmh=float(rec["speed_kmh"]),
                        t_entry=float(rec["t_entry"]),
                        t_exit=float(rec["t_exit"]),
                        axle_count=None if rec.get("axles") is None else int(rec["axles"]),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise SchemaError(f"{path}:{lineno}: bad event record: {exc}") from exc
    return events


# ---------------------------------------------------------------------------
# signal CSV (convenience text interface)


def write_signals_csv(path: str | Path, records: Sequence[SignalRecord]) -> None:
    """Header ``time,<id>,<id>,...``; one row per sample. Records must share
    t0, rate and length."""
    _check_aligned(records)
    times = records[0].times()
    data = np.column_stack([r.samples for r in records])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("time," + ",".join(str(r.sensor_id) for r in records) + "\n")
        for i in range(len(times)):
            row = ",".join(repr(float(v)) for v in data[i])
            fh.write(f"{float(times[i])!r},{row}\n")


def read_signals_csv(path: str | Path, modality: SensorModality) -> list[SignalRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[:1] != ["time"] or len(header) < 2:
            raise SchemaError(f"{path}: expected header 'time,<sensor ids...>'")
        try:
            sensor_ids = [int(c) for c in header[1:]]
        except ValueError as exc:
            raise SchemaError(f"{path}: sensor columns must be integer ids") from exc
        raw = np.loadtxt(fh, delimiter=",", ndmin=2)
    if raw.shape[1] != len(header):
        raise SchemaError(f"{path}: row width {raw.shape[1]} != header width {len(header)}")
    times = raw[:, 0]
    if len(times) < 2:
        raise SchemaError(f"{path}: need at least two samples to infer the rate")
    steps = np.diff(times)
    if not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-9):
        raise SchemaError(f"{path}: time column is not uniformly sampled")
    rate = 1.0 / steps.mean()
    return [
        SignalRecord(sensor_id=sid, modality=modality, sample_rate=rate,
                     t0=float(times[0]), samples=raw[:, j + 1])
        for j, sid in enumerate(sensor_ids)
    ]


def _check_aligned(records: Sequence[SignalRecord]) -> None:
    if not records:
        raise ValueError("no records")
    r0 = records[0]
    for r in records[1:]:
        if (
            r.n_samples != r0.n_samples
            or abs(r.t0 - r0.t0) > 1e-9
            or abs(r.sample_rate - r0.sample_rate) > 1e-9
        ):
            raise ValueError("records are not aligned (t0/rate/length differ)")


# ---------------------------------------------------------------------------
# binary signal shard


def write_signal_shard(path: str | Path, records: Sequence[SignalRecord]) -> None:
    """Write aligned records as one shard: 32-byte header + row-major
    little-endian float64 samples [n_samples x n_sensors]."""
    _check_aligned(records)
    r0 = records[0]
    data = np.column_stack([r.samples for r in records]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(
            _SHARD_HEADER.pack(
                SHARD_MAGIC, SHARD_VERSION, len(records), r0.sample_rate, r0.t0,
                r0.n_samples,
            )
        )
        fh.write(data.tobytes(order="C"))


def append_shard_rows(fh, block: np.ndarray) -> None:
    """Append a [rows x n_sensors] block to an open shard stream."""
    fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes(order="C"))


def write_shard_header(fh, n_sensors: int, rate: float, t0: float, n_samples: int) -> None:
    fh.write(_SHARD_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, n_sensors, rate, t0, n_samples))


def read_shard_header(path: str | Path) -> tuple[int, float, float, int]:
    """(n_sensors, sample_rate, t0, n_samples) without loading samples."""
    with open(path, "rb") as fh:
        header = fh.read(_SHARD_HEADER.size)
    if len(header) != _SHARD_HEADER.size:
        raise SchemaError(f"{path}: truncated shard header")
    magic, version, n_sensors, rate, t0, n_samples = _SHARD_HEADER.unpack(header)
    if magic != SHARD_MAGIC:
        raise SchemaError(f"{path}: bad magic {magic!r}")
    if version != SHARD_VERSION:
        raise SchemaError(f"{path}: unsupported shard version {version}")
    return n_sensors, rate, t0, n_samples


def read_signal_shard(
    path: str | Path,
    modality: SensorModality,
    sensor_ids: Optional[Sequence[int]] = None,
) -> list[SignalRecord]:
    with open(path, "rb") as fh:
        header = fh.read(_SHARD_HEADER.size)
        if len(header) != _SHARD_HEADER.size:
            raise SchemaError(f"{path}: truncated shard header")
        magic, version, n_sensors, rate, t0, n_samples = _SHARD_HEADER.unpack(header)
        if magic != SHARD_MAGIC:
            raise SchemaError(f"{path}: bad magic {magic!r}")
        if version != SHARD_VERSION:
            raise SchemaError(f"{path}: unsupported shard version {version}")
        data = np.fromfile(fh, dtype="<f8", count=n_samples * n_sensors)
    if data.size != n_samples * n_sensors:
        raise SchemaError(f"{path}: expected {n_samples * n_sensors} samples, got {data.size}")
    data = data.reshape(n_samples, n_sensors)
    if sensor_ids is None:
        sensor_ids = list(range(1, n_sensors + 1))
    elif len(sensor_ids) != n_sensors:
        raise SchemaError(f"{path}: {len(sensor_ids)} ids for {n_sensors} sensor columns")
    return [
        SignalRecord(sensor_id=int(sid), modality=modality, sample_rate=rate, t0=t0,
                     samples=data[:, j])
        for j, sid in enumerate(sensor_ids)
    ]


# ---------------------------------------------------------------------------
# array bundle: JSON manifest (names, shapes, byte offsets) + float64 blob.
# Used for window datasets and model checkpoints.

_BUNDLE_LEN = struct.Struct("<Q")


def write_bundle(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    offsets = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = arr.tobytes(order="C")
        offsets[name] = {
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "arrays": offsets,
        "meta": meta,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    payload = canonical_json(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_BUNDLE_LEN.pack(len(payload)))
        fh.write(payload)
        fh.write(blob)


def read_bundle(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        head = fh.read(_BUNDLE_LEN.size)
        if len(head) != _BUNDLE_LEN.size:
            raise SchemaError(f"{path}: truncated bundle")
        (manifest_len,) = _BUNDLE_LEN.unpack(head)
        try:
            manifest = json.loads(fh.read(manifest_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SchemaError(f"{path}: bad bundle manifest: {exc}") from exc
        blob = fh.read()
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise SchemaError(f"{path}: blob hash mismatch (corrupt or tampered file)")
    arrays = {}
    for name, entry in manifest["arrays"].items():
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(blob[start : start + nbytes], dtype="<f8")
        arrays[name] = arr.reshape(entry["shape"]).copy()
    return arrays, manifest["meta"]


# ---------------------------------------------------------------------------
# hashing / JSON helpers


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def canonical_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, no whitespace jitter)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def write_json(path: str | Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2))
        fh.write("\n")


def read_json(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# hourly count CSV


def hour_start_iso(seconds: float) -> str:
    """Seconds on the run clock (epoch-anchored, UTC) -> ISO hour stamp."""
    return datetime.fromtimestamp(seconds, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def iso_to_seconds(stamp: str) -> float:
    return datetime.strptime(stamp, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc).timestamp()


def write_hourly_csv(path: str | Path, hour_starts: np.ndarray, counts: np.ndarray) -> None:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[1] != 4 or counts.shape[0] != len(hour_starts):
        raise ValueError(f"counts must be [n_hours x 4], got {counts.shape}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("hour_start_iso,light_right,light_left,heavy_right,heavy_left\n")
        for t, row in zip(hour_starts, counts):
            fh.write(hour_start_iso(float(t)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def read_hourly_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "hour_start_iso,light_right,light_left,heavy_right,heavy_left":
            raise SchemaError(f"{path}: unexpected header {header!r}")
        starts, rows = [], []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != 5:
                raise SchemaError(f"{path}: expected 5 columns, got {len(cells)}")
            starts.append(iso_to_seconds(cells[0]))
            rows.append([float(c) for c in cells[1:]])
    return np.asarray(starts, dtype=np.float64), np.asarray(rows, dtype=np.float64)
