"""Unified run configuration.

One YAML file drives every pipeline stage: scenario generation, channel
preprocessing, model selection, training, and the peak-detection baseline.
Unknown keys are rejected with the offending dotted path, and every section
is validated against the owning module's invariants at load time. The
fully-merged configuration has a canonical JSON form whose SHA-256 prefix
identifies compatible artifacts (datasets vs. checkpoints).
"""

from __future__ import annotations

import copy
import math
from pathlib import Path
from typing import Optional

import yaml

from .baseline import PeakConfig
from .core import BridgeflowError, SensorModality
from .dsp import PreprocessConfig, Y_MAX_ACCELERATION, Y_MAX_STRAIN
from .io import config_hash
from .nets import CNNConfig, GATConfig, HeadConfig, MLPConfig, VARIANTS
from .simgen import BridgeModel, TrafficModel
from .train import TrainConfig

__all__ = ["ConfigInvalid", "RunConfig", "load_config", "default_config_dict"]


class ConfigInvalid(BridgeflowError):
    """Configuration file failed validation; the message names the key."""


_CATEGORY_KEYS = ("light_right", "light_left", "heavy_right", "heavy_left")

_DEFAULTS = {
    "seed": 0,
    "paths": {
        "output_dir": "runs",
    },
    "scenario": {
        "hours": 2.0,
        "hourly_rate": {
            "light_right": 68498 / 70.0,
            "light_left": 55572 / 70.0,
            "heavy_right": 4784 / 70.0,
            "heavy_left": 52 / 70.0,
        },
        "speed_mean_kmh": {"light": 96.5, "heavy": 85.0},
        "speed_std_kmh": {"light": 11.7, "heavy": 13.1},
        "speed_min_kmh": 30.0,
        "weight_mean_tonnes": {"light": 2.0, "heavy": 25.0},
        "min_headway": 0.5,
        "noise_std": {"acceleration": 0.02, "strain": 0.02},
    },
    "preprocess": {
        "modalities": ["strain"],
        "target_rate": 100.0,
        "ewma_alpha": 0.1,
        "cutoff_hz": 2.5,
        "filter_order": 2,
        "y_max_acceleration": Y_MAX_ACCELERATION,
        "y_max_strain": Y_MAX_STRAIN,
        "window_seconds": 5.0,
        "stride_train": 2.5,
        "stride_test": 5.0,
        "augment_variance": 0.04,
    },
    "model": {
        "variant": "cnn_gnn",
        "heads": 8,
        "head_dim": 128,
        "head_hidden": 128,
        "mlp_hidden": [128, 128],
        "dropout": 0.2,
        "cnn_filters": [16, 32, 64, 128, 256, 1280],
    },
    "training": {
        "peak_lr": 0.005,
        "warmup_epochs": 30,
        "cycle_epochs": 100,
        "min_lr": 1e-7,
        "weight_decay": 0.01,
        "clip_norm": 5.0,
        "batch_size": 256,
        "max_epochs": 200,
        "patience": 20,
        "val_fraction": 0.2,
    },
    "baseline": {
        "min_distance": 0.1,
        "left_light_low": 0.04,
        "left_boundary": 0.4,
        "left_high": 1.0,
        "right_light_low": 0.035,
        "right_boundary": 0.1,
        "right_high": 1.0,
        "grid_step": 0.005,
    },
}

_MODALITY_ORDER = (SensorModality.ACCELERATION, SensorModality.STRAIN)


def default_config_dict() -> dict:
    """Deep copy of the built-in defaults (the full key schema)."""
    return copy.deepcopy(_DEFAULTS)


def _type_name(value) -> str:
    return type(value).__name__


def _merge(defaults: dict, override: dict, path: str) -> dict:
    merged = {}
    for key, value in override.items():
        dotted = f"{path}{key}" if not path else f"{path}.{key}"
        if key not in defaults:
            raise ConfigInvalid(f"unknown configuration key {dotted!r}")
        default = defaults[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigInvalid(
                    f"{dotted!r} must be a mapping, got {_type_name(value)}"
                )
            merged[key] = _merge(default, value, dotted)
        elif isinstance(default, list):
            if not isinstance(value, list):
                raise ConfigInvalid(
                    f"{dotted!r} must be a list, got {_type_name(value)}"
                )
            merged[key] = copy.deepcopy(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigInvalid(
                    f"{dotted!r} must be a boolean, got {_type_name(value)}"
                )
            merged[key] = value
        elif isinstance(default, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigInvalid(
                    f"{dotted!r} must be a number, got {_type_name(value)}"
                )
            merged[key] = value
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigInvalid(
                    f"{dotted!r} must be a string, got {_type_name(value)}"
                )
            merged[key] = value
        else:  # pragma: no cover - schema holds only the types above
            merged[key] = copy.deepcopy(value)
    for key, default in defaults.items():
        if key not in merged:
            merged[key] = copy.deepcopy(default)
    return merged


class RunConfig:
    """Validated, fully-merged run configuration with typed accessors."""

    def __init__(self, data: Optional[dict] = None):
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigInvalid(
                f"configuration root must be a mapping, got {_type_name(data)}"
            )
        self.data = _merge(_DEFAULTS, data, "")
        self._validate()

    # -- typed sections -------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.data["paths"]["output_dir"])

    @property
    def hours(self) -> float:
        return float(self.data["scenario"]["hours"])

    def traffic_model(self) -> TrafficModel:
        s = self.data["scenario"]
        return TrafficModel(
            hourly_rate=tuple(float(s["hourly_rate"][k]) for k in _CATEGORY_KEYS),
            speed_mean_kmh=(
                float(s["speed_mean_kmh"]["light"]),
                float(s["speed_mean_kmh"]["heavy"]),
            ),
            speed_std_kmh=(
                float(s["speed_std_kmh"]["light"]),
                float(s["speed_std_kmh"]["heavy"]),
            ),
            speed_min_kmh=float(s["speed_min_kmh"]),
            weight_mean_tonnes=(
                float(s["weight_mean_tonnes"]["light"]),
                float(s["weight_mean_tonnes"]["heavy"]),
            ),
            min_headway=float(s["min_headway"]),
        )

    def bridge_model(self) -> BridgeModel:
        noise = self.data["scenario"]["noise_std"]
        return BridgeModel(
            noise_std_accel=float(noise["acceleration"]),
            noise_std_strain=float(noise["strain"]),
        )

    def modalities(self) -> tuple[SensorModality, ...]:
        wanted = self.data["preprocess"]["modalities"]
        return tuple(m for m in _MODALITY_ORDER if m.value in wanted)

    def preprocess_config(self) -> PreprocessConfig:
        p = self.data["preprocess"]
        return PreprocessConfig(
            target_rate=float(p["target_rate"]),
            ewma_alpha=float(p["ewma_alpha"]),
            cutoff_hz=float(p["cutoff_hz"]),
            filter_order=int(p["filter_order"]),
            y_max_acceleration=float(p["y_max_acceleration"]),
            y_max_strain=float(p["y_max_strain"]),
            window_seconds=float(p["window_seconds"]),
            stride_train=float(p["stride_train"]),
            stride_test=float(p["stride_test"]),
            augment_variance=float(p["augment_variance"]),
        )

    @property
    def window_len(self) -> int:
        p = self.data["preprocess"]
        return int(round(p["window_seconds"] * p["target_rate"]))

    @property
    def channels(self) -> int:
        return len(self.modalities())

    def model_configs(self) -> dict:
        m = self.data["model"]
        return {
            "variant": m["variant"],
            "cnn": CNNConfig(filters=tuple(m["cnn_filters"])),
            "gat": GATConfig(
                heads=int(m["heads"]),
                head_dim=int(m["head_dim"]),
                f_out=int(m["heads"]) * int(m["head_dim"]),
            ),
            "head": HeadConfig(hidden=int(m["head_hidden"])),
            "mlp": MLPConfig(
                hidden=tuple(m["mlp_hidden"]), dropout=float(m["dropout"])
            ),
        }

    def train_config(self) -> TrainConfig:
        t = self.data["training"]
        return TrainConfig(
            peak_lr=float(t["peak_lr"]),
            warmup_epochs=int(t["warmup_epochs"]),
            cycle_epochs=int(t["cycle_epochs"]),
            min_lr=float(t["min_lr"]),
            weight_decay=float(t["weight_decay"]),
            clip_norm=float(t["clip_norm"]),
            batch_size=int(t["batch_size"]),
            max_epochs=int(t["max_epochs"]),
            patience=int(t["patience"]),
            augment_variance=float(self.data["preprocess"]["augment_variance"]),
        )

    @property
    def val_fraction(self) -> float:
        return float(self.data["training"]["val_fraction"])

    def peak_config(self) -> PeakConfig:
        b = {k: v for k, v in self.data["baseline"].items() if k != "grid_step"}
        return PeakConfig(**{k: float(v) for k, v in b.items()})

    @property
    def grid_step(self) -> float:
        return float(self.data["baseline"]["grid_step"])

    # -- identity ---------------------------------------------------------
    def canonical(self) -> dict:
        return copy.deepcopy(self.data)

    def run_hash(self) -> str:
        return config_hash(self.data)

    def preprocess_hash(self) -> str:
        """Hash of the keys that must match between a dataset and a
        checkpoint for predictions to be meaningful."""
        return config_hash(self.data["preprocess"])

    # -- validation ---------------------------------------------------------
    def _validate(self) -> None:
        problems = []
        if not float(self.data["scenario"]["hours"]) > 0:
            problems.append(
                f"scenario.hours must be positive, got {self.data['scenario']['hours']}"
            )
        wanted = self.data["preprocess"]["modalities"]
        known = {m.value for m in _MODALITY_ORDER}
        if not wanted or not isinstance(wanted, list):
            problems.append("preprocess.modalities must be a non-empty list")
        else:
            unknown = [m for m in wanted if m not in known]
            if unknown:
                problems.append(
                    f"preprocess.modalities contains unknown entries {unknown}; "
                    f"choose from {sorted(known)}"
                )
            if len(set(wanted)) != len(wanted):
                problems.append("preprocess.modalities has duplicates")
        variant = self.data["model"]["variant"]
        if variant not in VARIANTS:
            problems.append(f"model.variant {variant!r} not in {VARIANTS}")
        if not 0 < float(self.data["training"]["val_fraction"]) < 1:
            problems.append(
                "training.val_fraction must lie in (0, 1), got "
                f"{self.data['training']['val_fraction']}"
            )
        if not problems:
            try:
                problems.extend(self.traffic_model().violations())
                problems.extend(self.bridge_model().violations())
                problems.extend(self.preprocess_config().violations())
                problems.extend(self.train_config().violations())
                problems.extend(self.peak_config().violations())
                configs = self.model_configs()
                for section in ("cnn", "gat", "head", "mlp"):
                    problems.extend(configs[section].violations())
                if self.window_len < 1:
                    problems.append("preprocess window must cover >= 1 sample")
                if not math.isfinite(self.grid_step) or self.grid_step <= 0:
                    problems.append(
                        f"baseline.grid_step must be positive, got {self.grid_step}"
                    )
            except (TypeError, ValueError) as exc:
                problems.append(str(exc))
        if problems:
            raise ConfigInvalid("; ".join(problems))


def load_config(path=None) -> RunConfig:
    """RunConfig from a YAML file (defaults when ``path`` is None)."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config file {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"config file {path} is not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigInvalid(
            f"config file {path} must hold a mapping, got {_type_name(data)}"
        )
    return RunConfig(data)
