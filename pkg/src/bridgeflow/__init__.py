"""bridgeflow: traffic volume estimation from bridge sensor networks.

The package turns raw accelerometer/strain-gauge recordings into hourly
vehicle counts per (class, lane) category, either with graph-attention /
MLP / CNN regressors trained on camera-derived labels, or with a
peak-detection baseline. A synthetic scenario generator and a camera
calibration + labelling path make the whole pipeline reproducible offline.

Top-level names are imported lazily so that the command-line entry point
can configure numerics (thread caps, determinism) before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_CORE_EXPORTS = (
    "BridgeflowError",
    "CATEGORY_NAMES",
    "FileMissing",
    "LaneId",
    "ModelGraph",
    "N_CATEGORIES",
    "SchemaMismatch",
    "SensorModality",
    "SignalRecord",
    "TrafficCategory",
    "VehicleClass",
    "VehicleEvent",
    "WindowSample",
    "category_index",
    "category_pair",
    "grid_graph",
    "random_split",
    "split_by_time",
)

__all__ = list(_CORE_EXPORTS) + ["__version__"]


def __getattr__(name: str):
    if name in _CORE_EXPORTS:
        value = getattr(importlib.import_module(".core", __name__), name)
        globals()[name] = value
        return value
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)
