"""Losses, optimizer, schedule, and the training loop.

The multi-task objective weights each category's squared error by a learned
log-variance: L = sum_k ( 0.5 * exp(-s_k) * MSE_k + s_k ), with s trainable
and initialized at zero so the untrained objective is exactly half the
summed MSE. The learning rate ramps linearly for 30 epochs to its peak,
then follows cosine cycles with warm restarts. AdamW applies decoupled
weight decay to every parameter except the uncertainty vector.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import io as _io
from . import tensor as T
from .core import BridgeflowError, N_CATEGORIES
from .tensor import NonFinite, Tensor
from .validation import check_labels, check_window_tensor

__all__ = [
    "Divergence",
    "UncertaintyState",
    "TrainConfig",
    "TrainReport",
    "mse_loss",
    "mae_loss",
    "uncertainty_loss",
    "lr_at",
    "global_grad_norm",
    "clip_gradients",
    "AdamW",
    "fit",
    "evaluate_mse",
]

#: Parameter names exempt from weight decay.
NO_DECAY = frozenset({"uncertainty.s"})


class Divergence(BridgeflowError):
    """Training produced a non-finite loss."""


class UncertaintyState:
    """Trainable per-category log-variances s_k = log sigma_k^2, init 0."""

    def __init__(self):
        self.s = T.parameter(np.zeros(N_CATEGORIES))

    @property
    def sigma_squared(self) -> np.ndarray:
        return np.exp(self.s.data)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings.

    The loop stops once the count of consecutive epochs without a strict
    validation improvement exceeds ``patience`` (patience 0 therefore stops
    at the first non-improving epoch), or at ``max_epochs``.
    """

    peak_lr: float = 0.005
    warmup_epochs: int = 30
    cycle_epochs: int = 100
    min_lr: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    clip_norm: float = 5.0
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 20
    augment_variance: float = 0.0

    def violations(self) -> list[str]:
        out = []
        if not 0 < self.min_lr < self.peak_lr:
            out.append(f"need 0 < min_lr < peak_lr, got {self.min_lr}, {self.peak_lr}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_epochs < 1 or self.cycle_epochs < 1:
            out.append("warmup_epochs and cycle_epochs must be >= 1")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            out.append("betas must lie in [0, 1)")
        if self.clip_norm <= 0:
            out.append("clip_norm must be positive")
        if self.max_epochs < 1 or self.patience < 0:
            out.append("max_epochs must be >= 1 and patience >= 0")
        if self.augment_variance < 0:
            out.append("augment_variance must be non-negative")
        return out


# ------------------------------------------------------------------ losses

def _pred_data(y_pred) -> np.ndarray:
    return y_pred.data if isinstance(y_pred, Tensor) else np.asarray(y_pred, float)


def mse_loss(y_true, y_pred) -> float:
    """Mean over batch and categories of squared error."""
    err = _pred_data(y_pred) - np.asarray(y_true, dtype=np.float64)
    return float(np.mean(err**2))


def mae_loss(y_true, y_pred) -> float:
    """Mean over batch and categories of absolute error."""
    err = _pred_data(y_pred) - np.asarray(y_true, dtype=np.float64)
    return float(np.mean(np.abs(err)))


def uncertainty_loss(y_true, y_pred: Tensor, state: UncertaintyState) -> Tensor:
    """Differentiable multi-task objective (see module docstring).

    ``y_true`` and ``y_pred`` are [B, 4]; the result is a scalar tensor with
    gradients flowing to the model outputs and to ``state.s``.
    """
    y = np.asarray(y_true, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != N_CATEGORIES or y.shape != y_pred.shape:
        raise T.ShapeMismatch(
            f"uncertainty_loss: expected matching [B, {N_CATEGORIES}] shapes, "
            f"got {y.shape} vs {y_pred.shape}"
        )
    residual = T.sub(y_pred, T.constant(y))
    per_category = T.mean_axis(T.square(residual), 0)  # [4]
    weighted = T.mul(T.mul(T.exp(T.mul(state.s, -1.0)), per_category), 0.5)
    return T.sum_axis(T.add(weighted, state.s), 0)


def per_category_mse(y_true, y_pred) -> np.ndarray:
    err = _pred_data(y_pred) - np.asarray(y_true, dtype=np.float64)
    return np.mean(err**2, axis=0)


# ------------------------------------------------------------------ schedule

def lr_at(epoch: int, config: TrainConfig) -> float:
    """Learning rate for a 0-indexed epoch: linear warmup to the peak, then
    cosine segments from peak to min_lr with warm restarts every cycle."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    warmup, cycle = config.warmup_epochs, config.cycle_epochs
    if epoch < warmup:
        return config.peak_lr * (epoch + 1) / warmup
    j = epoch - warmup
    if j == 0:
        position = 0.0
    else:
        position = (j - cycle * ((j - 1) // cycle)) / cycle
    return config.min_lr + 0.5 * (config.peak_lr - config.min_lr) * (
        1.0 + math.cos(math.pi * position)
    )


# ------------------------------------------------------------------ clipping

def global_grad_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float = 5.0):
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds
    max_norm; identity otherwise. Mutates and returns the arrays."""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return grads


# ------------------------------------------------------------------ optimizer

class AdamW:
    """Adam with decoupled weight decay; names in NO_DECAY skip the decay."""

    def __init__(self, params: dict, config: TrainConfig,
                 no_decay: frozenset = NO_DECAY):
        self.params = params
        self.config = config
        self.no_decay = no_decay
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        cfg = self.config
        self.t += 1
        bias1 = 1.0 - cfg.beta1**self.t
        bias2 = 1.0 - cfg.beta2**self.t
        for name, p in self.params.items():
            grad = p.grad
            if grad is None:
                grad = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * grad * grad
            update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
            if name not in self.no_decay and cfg.weight_decay > 0:
                update = update + cfg.weight_decay * p.data
            p.data = p.data - lr * update


# ------------------------------------------------------------------ report

@dataclass
class TrainReport:
    """Loss curves and stopping bookkeeping for one training run."""

    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_mse_per_category: list = field(default_factory=list)
    s_trace: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_epoch: int = -1
    diverged: bool = False

    def to_dict(self) -> dict:
        return {
            "train_loss": list(self.train_loss),
            "val_loss": list(self.val_loss),
            "val_mse_per_category": [list(row) for row in self.val_mse_per_category],
            "s_trace": [list(row) for row in self.s_trace],
            "lr_trace": list(self.lr_trace),
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stopped_epoch": self.stopped_epoch,
            "diverged": self.diverged,
        }

    def save(self, path) -> None:
        _io.write_json(path, self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "TrainReport":
        report = cls()
        for key, value in data.items():
            setattr(report, key, value)
        return report


# ------------------------------------------------------------------ fitting

def _batches(order: np.ndarray, size: int):
    for start in range(0, order.size, size):
        yield order[start:start + size]


def _forward_batched(model, x: np.ndarray, size: int) -> np.ndarray:
    outs = [model.forward(x[i:i + size]).data for i in range(0, x.shape[0], size)]
    return np.concatenate(outs, axis=0)


def _snapshot(params: dict) -> dict:
    return {name: p.data.copy() for name, p in params.items()}


def _restore(params: dict, snapshot: dict) -> None:
    for name, p in params.items():
        p.data = snapshot[name].copy()


def evaluate_mse(model, x: np.ndarray, y: np.ndarray,
                 batch_size: int = 256) -> dict:
    """Evaluation-mode losses on a dataset."""
    preds = _forward_batched(model, x, batch_size)
    return {
        "mse": mse_loss(y, preds),
        "mae": mae_loss(y, preds),
        "per_category_mse": per_category_mse(y, preds).tolist(),
    }


def fit(
    model,
    train_data: tuple,
    val_data: tuple,
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
    checkpoint_path=None,
) -> TrainReport:
    """Train ``model`` with the uncertainty-weighted objective.

    ``train_data``/``val_data`` are (windows [n, N, C, T], labels [n, 4]).
    Deterministic given ``seed``: epoch shuffles, augmentation noise, and
    dropout masks all derive from it. The model is left holding the best
    validation checkpoint; if ``checkpoint_path`` is given it is also
    written there atomically. A non-finite loss stops training immediately
    with the best finite checkpoint restored and ``diverged`` flagged.
    """
    problems = config.violations()
    if problems:
        raise ValueError("; ".join(problems))
    x_train, y_train = train_data
    x_val, y_val = val_data
    x_train = check_window_tensor(x_train)
    x_val = check_window_tensor(x_val)
    y_train = check_labels(y_train, x_train.shape[0])
    y_val = check_labels(y_val, x_val.shape[0])

    state = UncertaintyState()
    params = dict(model.parameters())
    params["uncertainty.s"] = state.s
    optimizer = AdamW(params, config)
    report = TrainReport()
    best = _snapshot(params)
    stale_epochs = 0
    noise_std = math.sqrt(config.augment_variance)

    for epoch in range(config.max_epochs):
        lr = lr_at(epoch, config)
        order = np.random.default_rng([seed, epoch, 0]).permutation(
            x_train.shape[0]
        )
        batch_losses = []
        batch_sizes = []
        try:
            for b, rows in enumerate(_batches(order, config.batch_size)):
                xb = x_train[rows]
                if noise_std > 0:
                    noise_rng = np.random.default_rng([seed, epoch, 1, b])
                    xb = xb + noise_rng.normal(0.0, noise_std, size=xb.shape)
                dropout_rng = np.random.default_rng([seed, epoch, 2, b])
                out = model.forward(xb, training=True, rng=dropout_rng)
                loss = uncertainty_loss(y_train[rows], out, state)
                value = loss.item()
                if not math.isfinite(value):
                    raise Divergence(f"non-finite loss at epoch {epoch}, batch {b}")
                T.zero_grad(params.values())
                T.backward(loss)
                clip_gradients(
                    [p.grad for p in params.values() if p.grad is not None],
                    config.clip_norm,
                )
                optimizer.step(lr)
                batch_losses.append(value)
                batch_sizes.append(rows.size)
            val_pred = _forward_batched(model, x_val, config.batch_size)
        except (Divergence, NonFinite):
            report.diverged = True
            report.stopped_epoch = epoch
            break

        val_mse_k = per_category_mse(y_val, val_pred)
        val_loss = float(
            np.sum(0.5 * np.exp(-state.s.data) * val_mse_k + state.s.data)
        )
        report.train_loss.append(
            float(np.average(batch_losses, weights=batch_sizes))
        )
        report.val_loss.append(val_loss)
        report.val_mse_per_category.append(val_mse_k.tolist())
        report.s_trace.append(state.s.data.tolist())
        report.lr_trace.append(lr)
        report.stopped_epoch = epoch

        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best = _snapshot(params)
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs > config.patience:
                break

    _restore(params, best)
    if checkpoint_path is not None:
        tmp = str(checkpoint_path) + ".tmp"
        model.save(tmp, extra_meta={
            "best_epoch": report.best_epoch,
            "best_val_loss": report.best_val_loss,
            "uncertainty_s": state.s.data.tolist(),
            "seed": seed,
        })
        os.replace(tmp, checkpoint_path)
    return report
