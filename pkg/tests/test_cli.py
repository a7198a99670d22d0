"""Command-line pipeline: smoke runs, determinism, and the error contract."""

import filecmp
import json
import subprocess
import sys
from types import SimpleNamespace

import numpy as np
import pytest
import yaml

from bridgeflow import io
from bridgeflow.cli import main
from bridgeflow.core import SensorModality
from bridgeflow.geolabel import (
    ControlPoint,
    PixelPoint,
    WorldPoint,
    project_to_pixel,
    solve_homography,
    write_homography,
)

SMOKE_CONFIG = {
    "seed": 5,
    "scenario": {"hours": 0.2},
    "model": {"variant": "fe_mlp", "mlp_hidden": [16], "dropout": 0.0},
    "training": {
        "batch_size": 64,
        "max_epochs": 2,
        "patience": 5,
        "warmup_epochs": 2,
        "cycle_epochs": 4,
        "val_fraction": 0.25,
    },
}


def run_cli(capsys, argv):
    """Invoke the CLI in-process; returns (exit code, stdout JSON, stderr JSON)."""
    code = main(argv)
    captured = capsys.readouterr()
    out = json.loads(captured.out.strip().splitlines()[-1]) if captured.out.strip() else None
    err = json.loads(captured.err.strip().splitlines()[-1]) if captured.err.strip() else None
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full simulate → label → preprocess → train → evaluate → infer run."""
    root = tmp_path_factory.mktemp("pipeline")
    config_path = root / "run.yaml"
    config_path.write_text(yaml.safe_dump(SMOKE_CONFIG), encoding="utf-8")
    sim = root / "sim"
    model_dir = root / "model"
    eval_dir = root / "eval"
    paths = SimpleNamespace(
        root=root,
        config=str(config_path),
        sim=sim,
        events=sim / "events.jsonl",
        labels_train=root / "labels_train.json",
        labels_test=root / "labels_test.json",
        train_bundle=root / "train.bundle",
        test_bundle=root / "test.bundle",
        model_dir=model_dir,
        checkpoint=model_dir / "model.ckpt",
        report=model_dir / "train_report.json",
        eval_dir=eval_dir,
        infer_csv=root / "infer.csv",
        baseline_dir=root / "baseline",
    )
    steps = [
        ["simulate", "--config", paths.config, "--out", str(sim)],
        ["label", "--events", str(paths.events), "--signals", str(sim),
         "--config", paths.config, "--mode", "train", "--out", str(paths.labels_train)],
        ["preprocess", "--signals", str(sim), "--config", paths.config,
         "--mode", "train", "--labels", str(paths.labels_train),
         "--out", str(paths.train_bundle)],
        ["label", "--events", str(paths.events), "--signals", str(sim),
         "--config", paths.config, "--mode", "test", "--out", str(paths.labels_test)],
        ["preprocess", "--signals", str(sim), "--config", paths.config,
         "--mode", "test", "--labels", str(paths.labels_test),
         "--out", str(paths.test_bundle)],
        ["train", "--dataset", str(paths.train_bundle), "--config", paths.config,
         "--out", str(model_dir)],
        ["evaluate", "--checkpoint", str(paths.checkpoint),
         "--dataset", str(paths.test_bundle), "--truth", str(paths.events),
         "--out", str(eval_dir)],
        ["infer", "--checkpoint", str(paths.checkpoint), "--signals", str(sim),
         "--out", str(paths.infer_csv)],
        ["baseline", "--signals", str(sim), "--config", paths.config,
         "--out", str(paths.baseline_dir)],
    ]
    for argv in steps:
        code = main(argv)
        assert code == 0, f"step {argv[0]} exited {code}"
    return paths


class TestSimulate:
    def test_artifacts_and_manifest_hashes(self, pipeline):
        manifest = io.read_json(pipeline.sim / "manifest.json")
        assert manifest["n_events"] > 0
        for name, digest in manifest["files"].items():
            assert io.sha256_file(pipeline.sim / name) == digest
        n_sensors, rate, t0, n_samples = io.read_shard_header(
            pipeline.sim / "signals_strain.bfsg"
        )
        assert (n_sensors, rate, t0) == (8, 100.0, 0.0)
        assert n_samples == int(0.2 * 3600 * 100)
        n_sensors, rate, _, n_samples = io.read_shard_header(
            pipeline.sim / "signals_acceleration.bfsg"
        )
        assert (n_sensors, rate) == (8, 250.0)
        assert n_samples == int(0.2 * 3600 * 250)

    def test_shards_read_back_clean(self, pipeline):
        records = io.read_signal_shard(
            pipeline.sim / "signals_strain.bfsg", SensorModality.STRAIN
        )
        assert len(records) == 8
        assert all(r.n_samples == 72000 for r in records)
        assert all(np.isfinite(r.samples).all() for r in records)
        assert max(float(np.abs(r.samples).max()) for r in records) > 1.0
        events = io.read_events(pipeline.events)
        assert events and all(0.0 <= e.t_entry < 720.0 for e in events)

    def test_rerun_is_byte_identical(self, pipeline, tmp_path, capsys):
        out = tmp_path / "sim2"
        code, payload, _ = run_cli(
            capsys,
            ["simulate", "--config", pipeline.config, "--out", str(out)],
        )
        assert code == 0 and payload["command"] == "simulate"
        for name in ("events.jsonl", "signals_strain.bfsg",
                     "signals_acceleration.bfsg", "manifest.json"):
            assert filecmp.cmp(out / name, pipeline.sim / name, shallow=False), name


class TestLabelPreprocess:
    def test_label_file_grid(self, pipeline):
        payload = io.read_json(pipeline.labels_train)
        # 720 s at 100 Hz target, 5 s window, 2.5 s train stride
        assert payload["n_windows"] == 287
        assert payload["stride"] == 2.5
        labels = np.asarray(payload["labels"])
        assert labels.shape == (287, 4)
        assert labels.sum() > 0

    def test_bundle_embeds_labels_and_meta(self, pipeline):
        arrays, meta = io.read_bundle(pipeline.train_bundle)
        assert arrays["x"].shape == (287, 8, 1, 500)
        assert arrays["y"].shape == (287, 4)
        assert arrays["y"].sum() > 0
        assert meta["has_labels"] is True
        assert meta["preprocess_hash"]
        assert set(meta["sources"]) == {"signals_strain.bfsg"}
        test_arrays, test_meta = io.read_bundle(pipeline.test_bundle)
        assert test_arrays["x"].shape == (144, 8, 1, 500)
        assert test_meta["mode"] == "test"

    def test_window_mass_conserves_events_within_grid(self, pipeline):
        # Windows tile each dwell at test stride == window, so total label
        # mass equals the number of events fully inside the covered span.
        payload = io.read_json(pipeline.labels_test)
        labels = np.asarray(payload["labels"])
        events = io.read_events(pipeline.events)
        span_end = payload["starts"][-1] + payload["window_seconds"]
        inside = [e for e in events if e.t_entry >= 0 and e.t_exit <= span_end]
        assert labels.sum() == pytest.approx(len(inside), abs=len(events) * 0.05 + 1)


class TestTrain:
    def test_report_and_checkpoint(self, pipeline):
        report = io.read_json(pipeline.report)
        assert len(report["val_loss"]) == 2
        assert report["best_epoch"] >= 0
        _, meta = io.read_bundle(pipeline.checkpoint)
        assert meta["config"]["variant"] == "fe_mlp"
        assert meta["preprocess"]["modalities"] == ["strain"]
        assert meta["preprocess_hash"]
        assert meta["dataset_sha256"] == io.sha256_file(pipeline.train_bundle)
        assert len(meta["uncertainty_s"]) == 4


class TestEvaluateInfer:
    def test_metrics_csv_rows(self, pipeline):
        rows = []
        import csv

        with open(pipeline.eval_dir / "metrics.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["category"] for r in rows] == [
            "light_right", "light_left", "heavy_right", "heavy_left",
        ]
        for row in rows:
            assert 0.0 <= float(row["accuracy"]) <= 1.0

    def test_hourly_series_written(self, pipeline):
        starts, counts = io.read_hourly_csv(pipeline.eval_dir / "hourly_pred.csv")
        t_starts, t_counts = io.read_hourly_csv(pipeline.eval_dir / "hourly_truth.csv")
        assert starts.shape == t_starts.shape == (1,)
        assert t_counts.sum() > 0

    def test_infer_matches_evaluate_predictions(self, pipeline):
        assert filecmp.cmp(
            pipeline.infer_csv, pipeline.eval_dir / "hourly_pred.csv", shallow=False
        )

    def test_infer_needs_only_checkpoint_and_signals(self, pipeline, tmp_path, capsys):
        clean = tmp_path / "deploy"
        clean.mkdir()
        for name in ("signals_strain.bfsg",):
            (clean / name).write_bytes((pipeline.sim / name).read_bytes())
        ckpt = tmp_path / "model.ckpt"
        ckpt.write_bytes(pipeline.checkpoint.read_bytes())
        out = tmp_path / "counts.csv"
        code, payload, _ = run_cli(
            capsys,
            ["infer", "--checkpoint", str(ckpt), "--signals", str(clean),
             "--out", str(out)],
        )
        assert code == 0 and payload["n_hours"] == 1
        assert filecmp.cmp(out, pipeline.infer_csv, shallow=False)


class TestBaselineCommand:
    def test_uncalibrated_counts_written(self, pipeline):
        starts, counts = io.read_hourly_csv(
            pipeline.baseline_dir / "hourly_counts.csv"
        )
        assert starts.shape == (1,)
        assert counts.sum() > 0

    def test_calibrate_below_one_hour_fails_cleanly(self, pipeline, tmp_path, capsys):
        code, _, err = run_cli(
            capsys,
            ["baseline", "--signals", str(pipeline.sim), "--config",
             pipeline.config, "--calibrate", "--events", str(pipeline.events),
             "--out", str(tmp_path / "base")],
        )
        assert code == 5
        assert err["error"] == "NoGroundTruth"

    def test_calibrate_requires_events(self, pipeline, tmp_path, capsys):
        code, _, err = run_cli(
            capsys,
            ["baseline", "--signals", str(pipeline.sim), "--config",
             pipeline.config, "--calibrate", "--out", str(tmp_path / "base")],
        )
        assert code == 2
        assert err["error"] == "ConfigInvalid"


class TestCalibrateCamera:
    def test_solves_and_writes_homography(self, tmp_path, capsys):
        a = np.array(
            [[42.0, 1.5, 80.0], [2.0, 38.0, 60.0], [1e-3, 2e-3, 1.0]]
        )

        def to_pixel(x, y):
            v = a @ [x, y, 1.0]
            return v[0] / v[2], v[1] / v[2]

        csv_path = tmp_path / "points.csv"
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("px,py,Xw,Yw\n")
            for x, y in [(0, 0), (7.2, 0), (0, 25), (7.2, 25), (3.6, 12.0)]:
                px, py = to_pixel(x, y)
                fh.write(f"{float(px)!r},{float(py)!r},{x!r},{y!r}\n")
        out = tmp_path / "homography.json"
        code, payload, _ = run_cli(
            capsys,
            ["calibrate-camera", "--points", str(csv_path), "--out", str(out)],
        )
        assert code == 0
        assert payload["max_reprojection_error"] < 1e-6
        from bridgeflow.geolabel import read_homography

        h = read_homography(out)
        pixel = project_to_pixel(h, WorldPoint(1.8, 20.0))
        px, py = to_pixel(1.8, 20.0)
        assert pixel.px == pytest.approx(px, abs=1e-6)
        assert pixel.py == pytest.approx(py, abs=1e-6)


class TestLabelFromTracks:
    def test_tracks_route(self, pipeline, tmp_path, capsys):
        h = solve_homography(
            [
                ControlPoint(PixelPoint(0, 0), WorldPoint(0, 0)),
                ControlPoint(PixelPoint(720, 10), WorldPoint(7.2, 0)),
                ControlPoint(PixelPoint(-20, 500), WorldPoint(0, 25)),
                ControlPoint(PixelPoint(700, 480), WorldPoint(7.2, 25)),
            ]
        )
        hom_path = tmp_path / "h.json"
        write_homography(hom_path, h)
        frames = []
        for i in range(16):
            t = 60.0 + i / 30.0
            world = WorldPoint(1.8, 5.0 + 20.0 * (t - 60.0))
            frames.append(
                {"id": 1, "t": t, "px": project_to_pixel(h, world).px,
                 "py": project_to_pixel(h, world).py, "class": "heavy"}
            )
        tracks_path = tmp_path / "tracks.jsonl"
        with open(tracks_path, "w", encoding="utf-8") as fh:
            for rec in frames:
                fh.write(json.dumps(rec) + "\n")
        out = tmp_path / "labels.json"
        code, payload, _ = run_cli(
            capsys,
            ["label", "--tracks", str(tracks_path), "--homography", str(hom_path),
             "--signals", str(pipeline.sim), "--config", pipeline.config,
             "--mode", "test", "--out", str(out)],
        )
        assert code == 0 and payload["n_events"] == 1
        labels = np.asarray(io.read_json(out)["labels"])
        # the single heavy-left event contributes exactly one count in total
        assert labels[:, 3].sum() == pytest.approx(1.0, abs=1e-9)
        assert labels[:, [0, 1, 2]].sum() == 0.0

    def test_tracks_without_homography_rejected(self, pipeline, tmp_path, capsys):
        code, _, err = run_cli(
            capsys,
            ["label", "--tracks", str(tmp_path / "t.jsonl"), "--signals",
             str(pipeline.sim), "--out", str(tmp_path / "l.json")],
        )
        assert code == 2 and err["error"] == "ConfigInvalid"


class TestErrorContract:
    def test_missing_file_exits_3(self, tmp_path, capsys):
        code, _, err = run_cli(
            capsys,
            ["label", "--events", str(tmp_path / "absent.jsonl"), "--signals",
             str(tmp_path), "--out", str(tmp_path / "l.json")],
        )
        assert code == 3
        assert err["error"] == "FileMissing"
        assert "absent.jsonl" in err["message"]

    def test_invalid_config_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("training:\n  optimizer: sgd\n", encoding="utf-8")
        code, _, err = run_cli(
            capsys,
            ["simulate", "--config", str(bad), "--out", str(tmp_path / "sim")],
        )
        assert code == 2
        assert err["error"] == "ConfigInvalid"
        assert "training.optimizer" in err["message"]

    def test_preprocess_hash_mismatch_exits_4(self, pipeline, tmp_path, capsys):
        other_config = tmp_path / "other.yaml"
        other = dict(SMOKE_CONFIG)
        other["preprocess"] = {"window_seconds": 10.0, "stride_test": 10.0}
        other_config.write_text(yaml.safe_dump(other), encoding="utf-8")
        bundle = tmp_path / "other.bundle"
        code = main(
            ["preprocess", "--signals", str(pipeline.sim), "--config",
             str(other_config), "--mode", "test", "--out", str(bundle)]
        )
        assert code == 0
        code, _, err = run_cli(
            capsys,
            ["evaluate", "--checkpoint", str(pipeline.checkpoint), "--dataset",
             str(bundle), "--truth", str(pipeline.events),
             "--out", str(tmp_path / "eval")],
        )
        assert code == 4
        assert err["error"] == "SchemaMismatch"

    def test_stale_labels_rejected(self, pipeline, tmp_path, capsys):
        code, _, err = run_cli(
            capsys,
            ["preprocess", "--signals", str(pipeline.sim), "--config",
             pipeline.config, "--mode", "test", "--labels",
             str(pipeline.labels_train), "--out", str(tmp_path / "d.bundle")],
        )
        assert code == 4
        assert "mode" in err["message"]

    def test_subprocess_entry_point(self, tmp_path):
        # the console path: module execution, --deterministic, JSON stderr
        proc = subprocess.run(
            [sys.executable, "-m", "bridgeflow.cli", "--deterministic",
             "calibrate-camera", "--points", str(tmp_path / "nope.csv"),
             "--out", str(tmp_path / "h.json")],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 3
        err = json.loads(proc.stderr.strip().splitlines()[-1])
        assert err["error"] == "FileMissing"
