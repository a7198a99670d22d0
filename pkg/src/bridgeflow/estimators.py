"""Scikit-learn style regressor facade over the window-to-counts models.

`TrafficVolumeRegressor` exposes the model variants and training loop with
flat constructor parameters so it composes with scikit-learn tooling
(`get_params`/`set_params`, cloning, pipelines next to
:class:`bridgeflow.dsp.WindowPreprocessor`).
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from . import nets, train
from .validation import check_labels, check_window_tensor

__all__ = ["TrafficVolumeRegressor"]


class TrafficVolumeRegressor(RegressorMixin, BaseEstimator):
    """Per-window vehicle-count regressor.

    ``fit`` trains the configured variant with the uncertainty-weighted
    multi-task objective; ``predict`` returns non-negative [n, 4] counts.
    When no validation split is passed to ``fit``, a deterministic
    ``val_fraction`` split of the training windows is held out.
    """

    def __init__(
        self,
        variant: str = "cnn_gnn",
        n_nodes: int = 8,
        channels: int = 1,
        window_len: int = 500,
        cnn_filters: tuple = (16, 32, 64, 128, 256, 1280),
        heads: int = 8,
        head_dim: int = 128,
        head_hidden: int = 128,
        mlp_hidden: tuple = (128, 128),
        dropout: float = 0.2,
        peak_lr: float = 0.005,
        warmup_epochs: int = 30,
        cycle_epochs: int = 100,
        min_lr: float = 1e-7,
        weight_decay: float = 0.01,
        clip_norm: float = 5.0,
        batch_size: int = 256,
        max_epochs: int = 200,
        patience: int = 20,
        augment_variance: float = 0.0,
        val_fraction: float = 0.2,
        seed: int = 0,
    ):
        self.variant = variant
        self.n_nodes = n_nodes
        self.channels = channels
        self.window_len = window_len
        self.cnn_filters = cnn_filters
        self.heads = heads
        self.head_dim = head_dim
        self.head_hidden = head_hidden
        self.mlp_hidden = mlp_hidden
        self.dropout = dropout
        self.peak_lr = peak_lr
        self.warmup_epochs = warmup_epochs
        self.cycle_epochs = cycle_epochs
        self.min_lr = min_lr
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.augment_variance = augment_variance
        self.val_fraction = val_fraction
        self.seed = seed

    # -- assembly ------------------------------------------------------
    def build_model(self) -> nets.TrafficNet:
        """Fresh, untrained network from the current parameters."""
        return nets.TrafficNet(
            variant=self.variant,
            n_nodes=self.n_nodes,
            channels=self.channels,
            window_len=self.window_len,
            cnn=nets.CNNConfig(filters=tuple(self.cnn_filters)),
            gat=nets.GATConfig(
                heads=self.heads,
                head_dim=self.head_dim,
                f_out=self.heads * self.head_dim,
            ),
            head=nets.HeadConfig(hidden=self.head_hidden),
            mlp=nets.MLPConfig(hidden=tuple(self.mlp_hidden), dropout=self.dropout),
            seed=self.seed,
        )

    def train_config(self) -> train.TrainConfig:
        return train.TrainConfig(
            peak_lr=self.peak_lr,
            warmup_epochs=self.warmup_epochs,
            cycle_epochs=self.cycle_epochs,
            min_lr=self.min_lr,
            weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            augment_variance=self.augment_variance,
        )

    def _split(self, x: np.ndarray, y: np.ndarray):
        if not 0 < self.val_fraction < 1:
            raise ValueError(
                f"val_fraction must lie in (0, 1), got {self.val_fraction}"
            )
        n = x.shape[0]
        n_val = max(1, int(round(n * self.val_fraction)))
        if n_val >= n:
            raise ValueError(
                f"cannot hold out {n_val} of {n} windows for validation"
            )
        order = np.random.default_rng([self.seed, 97]).permutation(n)
        val, tr = order[:n_val], order[n_val:]
        return (x[tr], y[tr]), (x[val], y[val])

    # -- estimator API ---------------------------------------------------
    def fit(
        self,
        X: np.ndarray,
        y: np.ndarray,
        X_val: Optional[np.ndarray] = None,
        y_val: Optional[np.ndarray] = None,
        checkpoint_path=None,
    ) -> "TrafficVolumeRegressor":
        """Train on window tensors [n, nodes, channels, steps] and [n, 4]
        per-window fractional counts."""
        x = check_window_tensor(X)
        labels = check_labels(y, x.shape[0])
        if (X_val is None) != (y_val is None):
            raise ValueError("pass X_val and y_val together or neither")
        if X_val is None:
            train_data, val_data = self._split(x, labels)
        else:
            x_val = check_window_tensor(X_val, name="X_val")
            train_data = (x, labels)
            val_data = (x_val, check_labels(y_val, x_val.shape[0], name="y_val"))
        self.model_ = self.build_model()
        self.report_ = train.fit(
            self.model_,
            train_data,
            val_data,
            config=self.train_config(),
            seed=self.seed,
            checkpoint_path=checkpoint_path,
        )
        return self

    def _require_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this TrafficVolumeRegressor is not fitted yet; call fit first"
            )

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Non-negative per-window count predictions [n, 4]."""
        self._require_fitted()
        x = check_window_tensor(X)
        chunks = [
            self.model_.predict_counts(x[i : i + self.batch_size])
            for i in range(0, x.shape[0], self.batch_size)
        ]
        return np.concatenate(chunks, axis=0)

    def save(self, path, extra_meta: Optional[dict] = None) -> None:
        self._require_fitted()
        self.model_.save(path, extra_meta=extra_meta or {})

    @classmethod
    def from_checkpoint(cls, path) -> "TrafficVolumeRegressor":
        """Inference-ready estimator from a model checkpoint."""
        model, meta = nets.TrafficNet.load(path)
        est = cls(
            variant=model.variant,
            n_nodes=model.n_nodes,
            channels=model.channels,
            window_len=model.window_len,
            cnn_filters=model.cnn.filters,
            heads=model.gat.heads,
            head_dim=model.gat.head_dim,
            head_hidden=model.head.hidden,
            mlp_hidden=model.mlp.hidden,
            dropout=model.mlp.dropout,
            seed=model.seed,
        )
        est.model_ = model
        est.meta_ = meta
        return est
