"""Model variants for window-level traffic regression.

Two encoders (hand-crafted per-channel statistics, or a temporal CNN shared
across sensor nodes) optionally feed two graph-attention layers over the
sensor topology; a mean readout and four independent regression heads
produce the per-category counts. The statistics+MLP variant skips graphs
entirely and flattens node features through a small MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .core import BridgeflowError, ModelGraph, N_CATEGORIES, grid_graph
from .tensor import Tensor

__all__ = [
    "UnknownVariant",
    "GraphNodeMismatch",
    "STAT_NAMES",
    "FEConfig",
    "CNNConfig",
    "GATConfig",
    "HeadConfig",
    "MLPConfig",
    "VARIANTS",
    "fe_encode",
    "gatv2_layer",
    "readout_mean",
    "TrafficNet",
]


class UnknownVariant(BridgeflowError):
    """Requested model variant is not one of the supported four."""


class GraphNodeMismatch(BridgeflowError):
    """Graph node count does not match the feature tensor."""


#: Fixed per-channel statistic order.
STAT_NAMES = ("min", "max", "mean", "std", "kurtosis", "rms", "abs_sum", "energy")

VARIANTS = ("fe_mlp", "fe_gnn", "cnn", "cnn_gnn")


@dataclass(frozen=True)
class FEConfig:
    stats: tuple = STAT_NAMES

    def violations(self) -> list[str]:
        if tuple(self.stats) != STAT_NAMES:
            return [f"statistic inventory must be {STAT_NAMES} in order"]
        return []


@dataclass(frozen=True)
class CNNConfig:
    filters: tuple = (16, 32, 64, 128, 256, 1280)
    kernel: int = 3
    stride: int = 2
    padding: int = 1

    def violations(self) -> list[str]:
        out = []
        if list(self.filters) != sorted(self.filters) or len(set(self.filters)) != len(
            self.filters
        ):
            out.append("channel counts must be strictly increasing")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            out.append("kernel/stride must be >= 1 and padding >= 0")
        return out


@dataclass(frozen=True)
class GATConfig:
    heads: int = 8
    layers: int = 2
    head_dim: int = 128
    negative_slope: float = 0.2
    f_out: int = 1024

    def violations(self) -> list[str]:
        out = []
        if self.heads * self.head_dim != self.f_out:
            out.append(
                f"heads x head_dim must equal f_out "
                f"({self.heads} x {self.head_dim} != {self.f_out})"
            )
        if self.heads < 1 or self.head_dim < 1 or self.layers < 1:
            out.append("heads, head_dim and layers must be positive")
        if not 0 < self.negative_slope < 1:
            out.append("negative_slope must lie in (0, 1)")
        return out


@dataclass(frozen=True)
class HeadConfig:
    hidden: int = 128
    k: int = N_CATEGORIES

    def violations(self) -> list[str]:
        out = []
        if self.k != N_CATEGORIES:
            out.append(f"decoder must have {N_CATEGORIES} heads, got {self.k}")
        if self.hidden < 1:
            out.append("hidden width must be positive")
        return out


@dataclass(frozen=True)
class MLPConfig:
    hidden: tuple = (128, 128)
    dropout: float = 0.2

    def violations(self) -> list[str]:
        out = []
        if not self.hidden or any(h < 1 for h in self.hidden):
            out.append("hidden widths must be positive")
        if not 0 <= self.dropout < 1:
            out.append("dropout must lie in [0, 1)")
        return out


# ------------------------------------------------------------------ features

def fe_encode(windows: np.ndarray) -> np.ndarray:
    """Per-node, per-channel statistics of window tensors.

    ``windows`` is [B, N, C, T] (or [N, C, T] for one sample); the result is
    [B, N, 8*C] with the 8 statistics in :data:`STAT_NAMES` order, channel
    blocks concatenated. Kurtosis is the standardized fourth moment m4/m2^2
    (not excess); a constant channel reports kurtosis 0 by convention.
    """
    x = np.asarray(windows, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected [B, N, C, T] windows, got shape {x.shape}")
    if x.shape[-1] < 4:
        raise ValueError("kurtosis needs at least 4 samples per window")
    mean = x.mean(axis=-1)
    centered = x - mean[..., None]
    m2 = np.mean(centered**2, axis=-1)
    m4 = np.mean(centered**4, axis=-1)
    degenerate = m2 < 1e-24 * np.maximum(1.0, mean**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        kurtosis = np.where(degenerate, 0.0, m4 / np.where(degenerate, 1.0, m2**2))
    stats = np.stack(
        [
            x.min(axis=-1),
            x.max(axis=-1),
            mean,
            np.sqrt(m2),
            kurtosis,
            np.sqrt(np.mean(x**2, axis=-1)),
            np.abs(x).sum(axis=-1),
            (x**2).sum(axis=-1),
        ],
        axis=-1,
    )  # [B, N, C, 8]
    batch, n_nodes, channels, _ = stats.shape
    out = stats.reshape(batch, n_nodes, channels * len(STAT_NAMES))
    return out[0] if single else out


# ------------------------------------------------------------------ layers

def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def gatv2_layer(
    features: Tensor,
    src: np.ndarray,
    dst: np.ndarray,
    w: Tensor,
    a: Tensor,
    u: Tensor,
    heads: int,
    head_dim: int,
    negative_slope: float = 0.2,
) -> Tensor:
    """One multi-head attention layer over directed edges (no final
    activation).

    Per head h: e_ij = a_h . LeakyReLU(W_h [x_i || x_j]); attention is a
    softmax over each destination's in-edges (self-loops included in the
    edge lists); output rows are attention-weighted sums of U_h x_j, heads
    concatenated. ``w`` is [2F, H*D] split into destination/source halves,
    ``a`` is [H, D], ``u`` is [F, H*D].
    """
    n_nodes, f_in = features.shape
    n_edges = src.shape[0]
    # Split W into its x_i (destination) and x_j (source) halves up front:
    # W [x_i || x_j] = W_dst x_i + W_src x_j.
    w_dst = T.gather_rows(w, np.arange(f_in))
    w_src = T.gather_rows(w, np.arange(f_in, 2 * f_in))
    proj_dst = T.matmul(features, w_dst)
    proj_src = T.matmul(features, w_src)
    z = T.add(T.gather_rows(proj_dst, dst), T.gather_rows(proj_src, src))
    z = T.reshape(z, (n_edges, heads, head_dim))
    scores = T.sum_axis(T.mul(T.leaky_relu(z, negative_slope), a), 2)  # [E, H]
    alpha = T.softmax_segmented(scores, dst, n_segments=n_nodes)
    messages = T.reshape(T.gather_rows(T.matmul(features, u), src),
                         (n_edges, heads, head_dim))
    # Scale each head's message by its attention weight: move D in front so
    # [E, H] broadcasts as a trailing suffix of [D, E, H].
    weighted = T.transpose(T.mul(T.transpose(messages, (2, 0, 1)), alpha), (1, 2, 0))
    out = T.scatter_rows(T.reshape(weighted, (n_edges, heads * head_dim)),
                         dst, n_nodes)
    return out


def readout_mean(node_features: Tensor, n_graphs: int, n_nodes: int) -> Tensor:
    """Mean over each graph's nodes: [G*N, F] -> [G, F]."""
    total, f_dim = node_features.shape
    if total != n_graphs * n_nodes:
        raise GraphNodeMismatch(
            f"{total} feature rows != {n_graphs} graphs x {n_nodes} nodes"
        )
    return T.mean_axis(T.reshape(node_features, (n_graphs, n_nodes, f_dim)), 1)


# ------------------------------------------------------------------ the net

class TrafficNet:
    """One of four window-to-counts regression variants.

    Parameters are double-precision tensors initialized from a seeded
    generator; ``forward`` consumes raw window arrays [B, N, C, T] and
    returns a [B, 4] tensor (training outputs unbounded; clamp at zero when
    evaluating counts).
    """

    def __init__(
        self,
        variant: str,
        n_nodes: int = 8,
        channels: int = 1,
        window_len: int = 500,
        graph: Optional[ModelGraph] = None,
        fe: FEConfig = FEConfig(),
        cnn: CNNConfig = CNNConfig(),
        gat: GATConfig = GATConfig(),
        head: HeadConfig = HeadConfig(),
        mlp: MLPConfig = MLPConfig(),
        seed: int = 0,
    ):
        if variant not in VARIANTS:
            raise UnknownVariant(f"variant {variant!r} not in {VARIANTS}")
        problems = (
            fe.violations() + cnn.violations() + gat.violations()
            + head.violations() + mlp.violations()
        )
        if problems:
            raise ValueError("; ".join(problems))
        if graph is None and variant in ("fe_gnn", "cnn_gnn"):
            graph = grid_graph(n_stations=n_nodes // 2, n_lines=2)
        if graph is not None and graph.n_nodes != n_nodes:
            raise GraphNodeMismatch(
                f"graph has {graph.n_nodes} nodes, model expects {n_nodes}"
            )
        self.variant = variant
        self.n_nodes = n_nodes
        self.channels = channels
        self.window_len = window_len
        self.graph = graph
        self.fe, self.cnn, self.gat, self.head, self.mlp = fe, cnn, gat, head, mlp
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._build(np.random.default_rng([seed, 0]))
        if graph is not None:
            self._src, self._dst = graph.edge_arrays()
        else:
            self._src = self._dst = None

    # -- construction -------------------------------------------------
    def _add(self, name: str, array: np.ndarray) -> None:
        self.params[name] = T.parameter(array)

    def _build(self, rng: np.random.Generator) -> None:
        variant = self.variant
        if variant.startswith("fe"):
            encode_dim = len(STAT_NAMES) * self.channels
        else:
            ladder = zip((self.channels,) + self.cnn.filters, self.cnn.filters)
            for idx, (f_in, f_out) in enumerate(ladder):
                self._add(f"cnn.block{idx}.w",
                          _glorot(rng, f_in * self.cnn.kernel, f_out,
                                  (f_out, f_in, self.cnn.kernel)))
                self._add(f"cnn.block{idx}.b", np.zeros(f_out))
            encode_dim = self.cnn.filters[-1]

        if variant == "fe_mlp":
            widths = (encode_dim * self.n_nodes,) + tuple(self.mlp.hidden) + (
                self.head.k,
            )
            for i, (f_in, f_out) in enumerate(zip(widths, widths[1:])):
                self._add(f"mlp.w{i}", _glorot(rng, f_in, f_out, (f_in, f_out)))
                self._add(f"mlp.b{i}", np.zeros(f_out))
            return

        f_dim = encode_dim
        if variant.endswith("gnn"):
            for layer in range(self.gat.layers):
                h, d = self.gat.heads, self.gat.head_dim
                self._add(f"gat{layer}.w",
                          _glorot(rng, 2 * f_dim, h * d, (2 * f_dim, h * d)))
                self._add(f"gat{layer}.a", _glorot(rng, d, 1, (h, d)))
                self._add(f"gat{layer}.u", _glorot(rng, f_dim, h * d, (f_dim, h * d)))
                f_dim = self.gat.f_out
        for k in range(self.head.k):
            self._add(f"head{k}.w0",
                      _glorot(rng, f_dim, self.head.hidden, (f_dim, self.head.hidden)))
            self._add(f"head{k}.b0", np.zeros(self.head.hidden))
            self._add(f"head{k}.w1",
                      _glorot(rng, self.head.hidden, 1, (self.head.hidden, 1)))
            self._add(f"head{k}.b1", np.zeros(1))

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    # -- forward pieces ------------------------------------------------
    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.n_nodes or x.shape[2] != self.channels:
            raise GraphNodeMismatch(
                f"expected windows [B, {self.n_nodes}, {self.channels}, T], "
                f"got {x.shape}"
            )
        if self.variant.startswith("cnn") and x.shape[3] != self.window_len:
            raise GraphNodeMismatch(
                f"temporal encoder is built for T={self.window_len}, got {x.shape[3]}"
            )
        return x

    def _dropout(self, t: Tensor, training: bool,
                 rng: Optional[np.random.Generator]) -> Tensor:
        p = self.mlp.dropout
        if not training or p <= 0:
            return t
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        keep = (rng.random(t.shape) >= p) / (1.0 - p)
        return T.mul(t, T.constant(keep))

    def _cnn_encode(self, x: np.ndarray) -> Tensor:
        batch, n_nodes = x.shape[0], x.shape[1]
        h = T.constant(x.reshape(batch * n_nodes, self.channels, self.window_len))
        n_blocks = len(self.cnn.filters)
        for i in range(n_blocks):
            h = T.silu(T.conv1d(h, self.params[f"cnn.block{i}.w"],
                                self.params[f"cnn.block{i}.b"],
                                stride=self.cnn.stride, padding=self.cnn.padding))
        return T.mean_axis(h, 2)  # [B*N, filters[-1]]

    def _gnn_stack(self, node_feats: Tensor, n_graphs: int) -> Tensor:
        n_nodes = self.n_nodes
        src = (np.tile(self._src, n_graphs)
               + np.repeat(np.arange(n_graphs) * n_nodes, self._src.size))
        dst = (np.tile(self._dst, n_graphs)
               + np.repeat(np.arange(n_graphs) * n_nodes, self._dst.size))
        h = node_feats
        for layer in range(self.gat.layers):
            h = gatv2_layer(
                h, src, dst,
                self.params[f"gat{layer}.w"], self.params[f"gat{layer}.a"],
                self.params[f"gat{layer}.u"],
                self.gat.heads, self.gat.head_dim, self.gat.negative_slope,
            )
            if layer + 1 < self.gat.layers:
                h = T.silu(h)
        return h

    def _decode(self, pooled: Tensor) -> Tensor:
        outs = []
        for k in range(self.head.k):
            h = T.silu(T.add(T.matmul(pooled, self.params[f"head{k}.w0"]),
                             self.params[f"head{k}.b0"]))
            outs.append(T.add(T.matmul(h, self.params[f"head{k}.w1"]),
                              self.params[f"head{k}.b1"]))
        return T.concat(outs, axis=1)

    def forward(
        self,
        x: np.ndarray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Window tensors [B, N, C, T] -> predicted counts [B, 4]."""
        x = self._check_input(x)
        batch = x.shape[0]
        if self.variant == "fe_mlp":
            feats = fe_encode(x).reshape(batch, -1)
            h = T.constant(feats)
            n_layers = len(self.mlp.hidden) + 1
            for i in range(n_layers):
                h = T.add(T.matmul(h, self.params[f"mlp.w{i}"]),
                          self.params[f"mlp.b{i}"])
                if i + 1 < n_layers:
                    h = self._dropout(T.silu(h), training, rng)
            return h
        if self.variant == "fe_gnn":
            feats = fe_encode(x).reshape(batch * self.n_nodes, -1)
            node = self._gnn_stack(T.constant(feats), batch)
        elif self.variant == "cnn":
            node = self._cnn_encode(x)
        elif self.variant == "cnn_gnn":
            node = self._gnn_stack(self._cnn_encode(x), batch)
        else:  # pragma: no cover - constructor rejects unknown variants
            raise UnknownVariant(self.variant)
        pooled = readout_mean(node, batch, self.n_nodes)
        return self._decode(pooled)

    def predict_counts(self, x: np.ndarray) -> np.ndarray:
        """Evaluation-mode forward with outputs clamped at zero."""
        return np.clip(self.forward(x, training=False).data, 0.0, None)

    # -- persistence ----------------------------------------------------
    def config_dict(self) -> dict:
        graph_edges = (
            sorted(self.graph.edges) if self.graph is not None else None
        )
        return {
            "variant": self.variant,
            "n_nodes": self.n_nodes,
            "channels": self.channels,
            "window_len": self.window_len,
            "graph_edges": graph_edges,
            "graph_self_loops": self.graph.self_loops if self.graph else True,
            "cnn_filters": list(self.cnn.filters),
            "cnn_kernel": self.cnn.kernel,
            "cnn_stride": self.cnn.stride,
            "cnn_padding": self.cnn.padding,
            "gat_heads": self.gat.heads,
            "gat_layers": self.gat.layers,
            "gat_head_dim": self.gat.head_dim,
            "gat_negative_slope": self.gat.negative_slope,
            "gat_f_out": self.gat.f_out,
            "head_hidden": self.head.hidden,
            "mlp_hidden": list(self.mlp.hidden),
            "mlp_dropout": self.mlp.dropout,
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, config: dict) -> "TrafficNet":
        graph = None
        if config.get("graph_edges") is not None:
            graph = ModelGraph(
                n_nodes=config["n_nodes"],
                edges=frozenset(tuple(e) for e in config["graph_edges"]),
                self_loops=config.get("graph_self_loops", True),
            )
        return cls(
            variant=config["variant"],
            n_nodes=config["n_nodes"],
            channels=config["channels"],
            window_len=config["window_len"],
            graph=graph,
            cnn=CNNConfig(
                filters=tuple(config["cnn_filters"]),
                kernel=config["cnn_kernel"],
                stride=config["cnn_stride"],
                padding=config["cnn_padding"],
            ),
            gat=GATConfig(
                heads=config["gat_heads"],
                layers=config["gat_layers"],
                head_dim=config["gat_head_dim"],
                negative_slope=config["gat_negative_slope"],
                f_out=config["gat_f_out"],
            ),
            head=HeadConfig(hidden=config["head_hidden"]),
            mlp=MLPConfig(
                hidden=tuple(config["mlp_hidden"]),
                dropout=config["mlp_dropout"],
            ),
            seed=config["seed"],
        )

    def save(self, path, extra_meta: Optional[dict] = None) -> None:
        meta = {"config": self.config_dict()}
        if extra_meta:
            meta.update(extra_meta)
        T.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> tuple["TrafficNet", dict]:
        arrays, meta = T.load_checkpoint(path)
        net = cls.from_config(meta["config"])
        for name, tensor in net.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            if arrays[name].shape != tensor.data.shape:
                raise GraphNodeMismatch(
                    f"checkpoint parameter {name!r} has shape "
                    f"{arrays[name].shape}, model expects {tensor.data.shape}"
                )
            tensor.data = arrays[name].copy()
        return net, meta
