"""Command-line pipeline with reproducible, file-based stage handoffs.

Stage 1 (labeling and training): ``simulate`` renders a synthetic scenario
to signal shards + an events file, ``calibrate-camera`` fits the image to
road-plane homography, ``label`` turns events or camera tracks into
fractional window labels, ``preprocess`` builds windowed dataset bundles,
``train`` fits a model, ``baseline`` calibrates and runs the peak-detection
counter. Stage 2 (deployment): ``infer`` and ``evaluate`` consume only a
checkpoint plus signals/datasets — no camera artifacts.

Every command is deterministic given ``--seed``, exits 0 on success, and on
failure prints one machine-readable JSON line to stderr (``error``,
``message``) with a nonzero exit code. All artifacts carry content hashes
in their manifests so stages can refuse mismatched inputs.

Heavy imports happen inside each command so that ``--deterministic`` and
the ``BRIDGEFLOW_THREADS`` environment variable can cap numerics threads
before numpy first loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

__all__ = ["main", "build_parser"]

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

#: Exit codes by error class name (anything else structured exits 5,
#: unexpected exceptions exit 1).
_EXIT_CODES = {
    "ConfigInvalid": 2,
    "FileMissing": 3,
    "SchemaMismatch": 4,
    "SchemaError": 4,
}


def _configure_threads(deterministic: bool) -> None:
    """Cap numerics threads; must run before numpy is first imported."""
    if deterministic:
        for var in _THREAD_VARS:
            os.environ[var] = "1"
        return
    cap = os.environ.get("BRIDGEFLOW_THREADS")
    if cap:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, cap)


def _require_file(path, role: str) -> Path:
    from .core import FileMissing

    path = Path(path)
    if not path.is_file():
        raise FileMissing(f"{role} file not found: {path}")
    return path


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _shard_path(signals_dir, modality) -> Path:
    return Path(signals_dir) / f"signals_{modality.value}.bfsg"


def _load_processed(signals_dir, modalities, pcfg):
    """Per-node channel lists from a shard directory, through the
    per-modality pipeline (resample, filter, drift removal, normalize)."""
    from . import dsp, io

    per_modality = []
    sources = {}
    for modality in modalities:
        path = _require_file(_shard_path(signals_dir, modality), "signal shard")
        records = io.read_signal_shard(path, modality)
        per_modality.append([dsp.preprocess_channel(r, pcfg) for r in records])
        sources[path.name] = io.sha256_file(path)
    n_nodes = len(per_modality[0])
    if any(len(records) != n_nodes for records in per_modality):
        from .core import SchemaMismatch

        raise SchemaMismatch(
            "signal shards disagree on sensor count: "
            + ", ".join(str(len(r)) for r in per_modality)
        )
    channels = [[mod[node] for mod in per_modality] for node in range(n_nodes)]
    return channels, sources


def _hourly_from_predictions(starts, preds, window_seconds):
    from .metrics import hourly_aggregate

    return hourly_aggregate(starts, preds, window_seconds)


def _preprocess_config_from_meta(meta: dict):
    from .core import SchemaMismatch, SensorModality
    from .dsp import PreprocessConfig

    section = meta.get("preprocess")
    if not isinstance(section, dict):
        raise SchemaMismatch(
            "checkpoint lacks an embedded preprocessing configuration; "
            "retrain with the current pipeline"
        )
    order = (SensorModality.ACCELERATION, SensorModality.STRAIN)
    modalities = tuple(m for m in order if m.value in section["modalities"])
    kwargs = {k: v for k, v in section.items() if k != "modalities"}
    return PreprocessConfig(**kwargs), modalities


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    from . import io, simgen
    from .config import load_config
    from .core import SensorModality

    config = load_config(args.config)
    seed = config.seed if args.seed is None else args.seed
    hours = config.hours if args.hours is None else args.hours
    if hours <= 0:
        from .config import ConfigInvalid

        raise ConfigInvalid(f"--hours must be positive, got {hours}")
    duration = hours * 3600.0
    traffic = config.traffic_model()
    bridge = config.bridge_model()
    out = _out_dir(args.out)

    events = simgen.sample_traffic(
        traffic, duration, seed, plane_length=bridge.span
    )
    events_path = out / "events.jsonl"
    io.write_events(events_path, events)

    rates = {
        SensorModality.ACCELERATION: simgen.RATE_ACCELERATION,
        SensorModality.STRAIN: simgen.RATE_STRAIN,
    }
    paths = {m: _shard_path(out, m) for m in rates}
    handles = {}
    written = {m: 0 for m in rates}
    try:
        for modality, rate in rates.items():
            fh = open(paths[modality], "wb")
            handles[modality] = fh
            io.write_shard_header(
                fh, bridge.n_nodes, rate, 0.0, int(round(duration * rate))
            )
        for _, _, blocks in simgen.iter_render_chunks(
            events, bridge, duration, seed
        ):
            for modality, block in blocks.items():
                io.append_shard_rows(handles[modality], block.T)
                written[modality] += block.shape[1]
    finally:
        for fh in handles.values():
            fh.close()
    for modality, rate in rates.items():
        expected = int(round(duration * rate))
        if written[modality] != expected:  # pragma: no cover - internal check
            raise RuntimeError(
                f"{paths[modality]}: wrote {written[modality]} samples, "
                f"expected {expected}"
            )

    manifest = {
        "command": "simulate",
        "seed": seed,
        "hours": hours,
        "run_config_hash": config.run_hash(),
        "scenario": config.canonical()["scenario"],
        "n_events": len(events),
        "files": {
            p.name: io.sha256_file(p)
            for p in (events_path, *paths.values())
        },
    }
    io.write_json(out / "manifest.json", manifest)
    _emit(
        {
            "command": "simulate",
            "out": str(out),
            "n_events": len(events),
            "hours": hours,
            "seed": seed,
        }
    )
    return 0


def cmd_calibrate_camera(args) -> int:
    import math

    from . import geolabel

    points_path = _require_file(args.points, "control points")
    points = geolabel.read_control_points(points_path)
    h = geolabel.solve_homography(points)
    geolabel.write_homography(args.out, h)
    error = max(
        math.hypot(p.pixel.px - q.px, p.pixel.py - q.py)
        for p in points
        for q in (geolabel.project_to_pixel(h, p.world),)
    )
    _emit(
        {
            "command": "calibrate-camera",
            "out": str(args.out),
            "n_points": len(points),
            "max_reprojection_error": error,
        }
    )
    return 0


def cmd_label(args) -> int:
    import numpy as np

    from . import geolabel, io
    from .config import ConfigInvalid, load_config

    config = load_config(args.config)
    pcfg = config.preprocess_config()

    if args.events is not None:
        events = io.read_events(_require_file(args.events, "events"))
        dropped = 0
        source = Path(args.events)
    else:
        if args.homography is None:
            raise ConfigInvalid("--tracks requires --homography")
        tracks = geolabel.read_tracks(_require_file(args.tracks, "tracks"))
        h = geolabel.read_homography(
            _require_file(args.homography, "homography")
        )
        events, dropped = geolabel.events_from_tracks(
            tracks, h, geolabel.PlaneSpec()
        )
        source = Path(args.tracks)

    shard = _require_file(
        _shard_path(args.signals, config.modalities()[0]), "signal shard"
    )
    _, native_rate, t0, n_samples = io.read_shard_header(shard)
    duration = n_samples / native_rate
    n_processed = int(round(duration * pcfg.target_rate))
    win = int(round(pcfg.window_seconds * pcfg.target_rate))
    stride = int(round(pcfg.stride(args.mode) * pcfg.target_rate))
    n_windows = max(0, (n_processed - win) // stride + 1)
    labels = geolabel.assign_fractional_labels(
        events, t0, pcfg.window_seconds, pcfg.stride(args.mode), n_windows
    )
    starts = t0 + np.arange(n_windows) * pcfg.stride(args.mode)

    payload = {
        "mode": args.mode,
        "window_seconds": pcfg.window_seconds,
        "stride": pcfg.stride(args.mode),
        "origin_t0": t0,
        "n_windows": n_windows,
        "preprocess_hash": config.preprocess_hash(),
        "source": source.name,
        "source_sha256": io.sha256_file(source),
        "n_events": len(events),
        "dropped_tracks": dropped,
        "starts": starts.tolist(),
        "labels": labels.tolist(),
    }
    io.write_json(args.out, payload)
    _emit(
        {
            "command": "label",
            "out": str(args.out),
            "n_windows": n_windows,
            "n_events": len(events),
            "dropped_tracks": dropped,
        }
    )
    return 0


def cmd_preprocess(args) -> int:
    import numpy as np

    from . import dsp, io
    from .config import load_config
    from .core import SchemaMismatch

    config = load_config(args.config)
    pcfg = config.preprocess_config()
    channels, sources = _load_processed(args.signals, config.modalities(), pcfg)
    windows = dsp.window_segments(channels, pcfg, args.mode)
    if not windows:
        raise SchemaMismatch(
            f"signals in {args.signals} are shorter than one "
            f"{pcfg.window_seconds} s window"
        )
    x, starts, y = dsp.stack_windows(windows)

    labels_sha = None
    if args.labels is not None:
        labels_path = _require_file(args.labels, "labels")
        payload = io.read_json(labels_path)
        if payload.get("mode") != args.mode:
            raise SchemaMismatch(
                f"labels were generated for mode {payload.get('mode')!r}, "
                f"preprocess is running mode {args.mode!r}"
            )
        if payload.get("preprocess_hash") != config.preprocess_hash():
            raise SchemaMismatch(
                "labels preprocess hash "
                f"{payload.get('preprocess_hash')} does not match the "
                f"current configuration {config.preprocess_hash()}"
            )
        label_starts = np.asarray(payload["starts"], dtype=np.float64)
        if label_starts.shape != starts.shape or not np.allclose(
            label_starts, starts, atol=1e-6
        ):
            raise SchemaMismatch(
                f"labels cover {label_starts.shape[0]} windows, signals "
                f"produce {starts.shape[0]}; regenerate labels on these signals"
            )
        y = np.asarray(payload["labels"], dtype=np.float64)
        labels_sha = io.sha256_file(labels_path)

    meta = {
        "command": "preprocess",
        "mode": args.mode,
        "preprocess": config.canonical()["preprocess"],
        "preprocess_hash": config.preprocess_hash(),
        "window_seconds": pcfg.window_seconds,
        "n_nodes": x.shape[1],
        "channels": x.shape[2],
        "window_len": x.shape[3],
        "has_labels": args.labels is not None,
        "sources": sources,
        "labels_sha256": labels_sha,
    }
    io.write_bundle(args.out, {"x": x, "y": y, "starts": starts}, meta)
    _emit(
        {
            "command": "preprocess",
            "out": str(args.out),
            "n_windows": int(x.shape[0]),
            "shape": list(x.shape),
        }
    )
    return 0


def _load_dataset(path, config):
    from . import io
    from .core import SchemaMismatch

    path = _require_file(path, "dataset")
    arrays, meta = io.read_bundle(path)
    if meta.get("preprocess_hash") != config.preprocess_hash():
        raise SchemaMismatch(
            f"dataset {path} was preprocessed with hash "
            f"{meta.get('preprocess_hash')}, the current configuration "
            f"hashes to {config.preprocess_hash()}"
        )
    expected = (config.channels, config.window_len)
    got = (int(meta["channels"]), int(meta["window_len"]))
    if got != expected:  # pragma: no cover - hash mismatch catches this first
        raise SchemaMismatch(
            f"dataset {path} windows are C={got[0]}, T={got[1]}; the "
            f"configuration expects C={expected[0]}, T={expected[1]}"
        )
    return arrays, meta, path


def cmd_train(args) -> int:
    import os as _os

    from . import io
    from .config import load_config
    from .estimators import TrafficVolumeRegressor

    config = load_config(args.config)
    arrays, meta, dataset_path = _load_dataset(args.dataset, config)
    model_configs = config.model_configs()
    train_config = config.train_config()
    est = TrafficVolumeRegressor(
        variant=model_configs["variant"],
        n_nodes=int(meta["n_nodes"]),
        channels=config.channels,
        window_len=config.window_len,
        cnn_filters=model_configs["cnn"].filters,
        heads=model_configs["gat"].heads,
        head_dim=model_configs["gat"].head_dim,
        head_hidden=model_configs["head"].hidden,
        mlp_hidden=model_configs["mlp"].hidden,
        dropout=model_configs["mlp"].dropout,
        peak_lr=train_config.peak_lr,
        warmup_epochs=train_config.warmup_epochs,
        cycle_epochs=train_config.cycle_epochs,
        min_lr=train_config.min_lr,
        weight_decay=train_config.weight_decay,
        clip_norm=train_config.clip_norm,
        batch_size=train_config.batch_size,
        max_epochs=args.max_epochs or train_config.max_epochs,
        patience=train_config.patience,
        augment_variance=train_config.augment_variance,
        val_fraction=config.val_fraction,
        seed=config.seed if args.seed is None else args.seed,
    )

    kwargs = {}
    if args.val_dataset is not None:
        val_arrays, _, _ = _load_dataset(args.val_dataset, config)
        kwargs = {"X_val": val_arrays["x"], "y_val": val_arrays["y"]}

    out = _out_dir(args.out)
    checkpoint = out / "model.ckpt"
    est.fit(arrays["x"], arrays["y"], checkpoint_path=checkpoint, **kwargs)

    # Enrich the best-epoch checkpoint with deployment metadata: the
    # preprocessing config (Stage-2 inference needs no config file) and
    # provenance hashes.
    _, ckpt_meta = io.read_bundle(checkpoint)
    extra = {
        key: ckpt_meta[key]
        for key in ("best_epoch", "best_val_loss", "uncertainty_s", "seed")
    }
    extra.update(
        {
            "preprocess": config.canonical()["preprocess"],
            "preprocess_hash": config.preprocess_hash(),
            "dataset_sha256": io.sha256_file(dataset_path),
            "run_config_hash": config.run_hash(),
        }
    )
    tmp = str(checkpoint) + ".tmp"
    est.model_.save(tmp, extra_meta=extra)
    _os.replace(tmp, checkpoint)
    est.report_.save(out / "train_report.json")

    _emit(
        {
            "command": "train",
            "out": str(out),
            "variant": est.variant,
            "param_count": est.model_.param_count,
            "best_epoch": est.report_.best_epoch,
            "best_val_loss": est.report_.best_val_loss,
            "stopped_epoch": est.report_.stopped_epoch,
            "diverged": est.report_.diverged,
        }
    )
    return 0


def cmd_baseline(args) -> int:
    import numpy as np

    from . import baseline, io
    from .config import ConfigInvalid, load_config
    from .core import SensorModality

    config = load_config(args.config)
    pcfg = config.preprocess_config()
    channels, _ = _load_processed(
        args.signals, (SensorModality.STRAIN,), pcfg
    )
    records = [node[0] for node in channels]
    peak = config.peak_config()
    out = _out_dir(args.out)

    calibrated_from = None
    if args.calibrate:
        if args.events is None:
            raise ConfigInvalid("--calibrate requires --events ground truth")
        events = io.read_events(_require_file(args.events, "events"))
        peak = baseline.calibrate_thresholds(
            records, events, config=peak, grid_step=config.grid_step
        )
        calibrated_from = Path(args.events).name
        io.write_json(
            out / "calibrated_baseline.json",
            {
                "config": peak.to_dict(),
                "grid_step": config.grid_step,
                "events_file": calibrated_from,
                "events_sha256": io.sha256_file(args.events),
            },
        )

    series = baseline.hourly_counts(records, peak)
    csv_path = out / "hourly_counts.csv"
    io.write_hourly_csv(csv_path, np.asarray(series.hour_starts), series.counts)
    _emit(
        {
            "command": "baseline",
            "out": str(csv_path),
            "n_hours": series.n_hours,
            "calibrated": bool(args.calibrate),
            "left_boundary": peak.left_boundary,
            "right_boundary": peak.right_boundary,
        }
    )
    return 0


def cmd_evaluate(args) -> int:
    import numpy as np

    from . import io, metrics
    from .core import SchemaMismatch
    from .estimators import TrafficVolumeRegressor

    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    est = TrafficVolumeRegressor.from_checkpoint(ckpt_path)
    arrays, meta = io.read_bundle(_require_file(args.dataset, "dataset"))
    ckpt_hash = est.meta_.get("preprocess_hash")
    data_hash = meta.get("preprocess_hash")
    if ckpt_hash != data_hash:
        raise SchemaMismatch(
            f"checkpoint preprocessing hash {ckpt_hash} does not match "
            f"dataset preprocessing hash {data_hash}; evaluate refuses "
            "mixed pipelines"
        )

    preds = est.predict(arrays["x"])
    pred_series = _hourly_from_predictions(
        arrays["starts"], preds, float(meta["window_seconds"])
    )
    events = io.read_events(_require_file(args.truth, "truth events"))
    truth = metrics.events_to_hourly(
        events,
        origin=pred_series.hour_starts[0],
        n_hours=pred_series.n_hours,
    )
    rows = metrics.metrics_report(pred_series, truth)
    emitted_rows = [
        {
            key: (None if isinstance(val, float) and not np.isfinite(val) else val)
            for key, val in row.items()
        }
        for row in rows
    ]

    out = _out_dir(args.out)
    metrics.write_metrics_csv(out / "metrics.csv", rows)
    io.write_hourly_csv(
        out / "hourly_pred.csv",
        np.asarray(pred_series.hour_starts),
        pred_series.counts,
    )
    io.write_hourly_csv(
        out / "hourly_truth.csv", np.asarray(truth.hour_starts), truth.counts
    )
    _emit(
        {
            "command": "evaluate",
            "out": str(out),
            "n_hours": pred_series.n_hours,
            "rows": emitted_rows,
        }
    )
    return 0


def cmd_infer(args) -> int:
    import numpy as np

    from . import dsp, io
    from .estimators import TrafficVolumeRegressor

    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    est = TrafficVolumeRegressor.from_checkpoint(ckpt_path)
    pcfg, modalities = _preprocess_config_from_meta(est.meta_)
    channels, _ = _load_processed(args.signals, modalities, pcfg)
    windows = dsp.window_segments(channels, pcfg, "test")
    if not windows:
        from .core import SchemaMismatch

        raise SchemaMismatch(
            f"signals in {args.signals} are shorter than one "
            f"{pcfg.window_seconds} s window"
        )
    x, starts, _ = dsp.stack_windows(windows)
    preds = est.predict(x)
    series = _hourly_from_predictions(starts, preds, pcfg.window_seconds)
    io.write_hourly_csv(args.out, np.asarray(series.hour_starts), series.counts)
    _emit(
        {
            "command": "infer",
            "out": str(args.out),
            "n_windows": int(x.shape[0]),
            "n_hours": series.n_hours,
        }
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bridgeflow",
        description="Traffic volume estimation from bridge sensor networks.",
    )
    parser.add_argument(
        "--deterministic",
        action="store_true",
        help="force single-threaded numerics (set before numpy loads)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic scenario")
    p.add_argument("--config", default=None, help="run configuration YAML")
    p.add_argument("--hours", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser(
        "calibrate-camera", help="fit the image-to-road homography"
    )
    p.add_argument("--points", required=True, help="control points CSV")
    p.add_argument("--out", required=True, help="homography JSON path")
    p.set_defaults(func=cmd_calibrate_camera)

    p = sub.add_parser("label", help="fractional window labels from events or tracks")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--events", default=None, help="events JSONL")
    source.add_argument("--tracks", default=None, help="camera tracks JSONL")
    p.add_argument("--homography", default=None, help="homography JSON (with --tracks)")
    p.add_argument("--signals", required=True, help="signal shard directory")
    p.add_argument("--config", default=None)
    p.add_argument("--mode", choices=("train", "test"), default="train")
    p.add_argument("--out", required=True, help="labels JSON path")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("preprocess", help="windowed dataset bundle from signals")
    p.add_argument("--signals", required=True, help="signal shard directory")
    p.add_argument("--config", default=None)
    p.add_argument("--mode", choices=("train", "test"), default="train")
    p.add_argument("--labels", default=None, help="labels JSON to embed")
    p.add_argument("--out", required=True, help="dataset bundle path")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="fit a model on a dataset bundle")
    p.add_argument("--dataset", required=True)
    p.add_argument("--val-dataset", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline", help="peak-detection hourly counts")
    p.add_argument("--signals", required=True, help="signal shard directory")
    p.add_argument("--events", default=None, help="events JSONL for calibration")
    p.add_argument("--calibrate", action="store_true")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="metrics for a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--truth", required=True, help="events JSONL ground truth")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("infer", help="hourly counts from checkpoint + signals")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--signals", required=True, help="signal shard directory")
    p.add_argument("--out", required=True, help="hourly counts CSV path")
    p.set_defaults(func=cmd_infer)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _configure_threads(args.deterministic)
    try:
        return args.func(args)
    except Exception as exc:  # structured failure contract
        line = json.dumps(
            {"error": type(exc).__name__, "message": str(exc)}, sort_keys=True
        )
        print(line, file=sys.stderr)
        from .core import BridgeflowError

        code = _EXIT_CODES.get(type(exc).__name__)
        if code is None:
            code = 5 if isinstance(exc, (BridgeflowError, ValueError)) else 1
        return code


if __name__ == "__main__":
    raise SystemExit(main())
