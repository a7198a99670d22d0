"""Dense-tensor engine with reverse-mode differentiation.

Double-precision only, single-threaded tapes, and deliberately small
operation inventory: exactly what the model variants need. Broadcasting is
restricted to leading-axis expansion (a shape may be a trailing suffix of
the other); anything richer must be spelled out with explicit reshapes.
conv1d builds an explicit im2col matrix so the forward pass is a plain
matrix product that can be audited against a loop reference.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .core import BridgeflowError
from . import io as _io

__all__ = [
    "ShapeMismatch",
    "NonFinite",
    "NonScalarLoss",
    "Tensor",
    "parameter",
    "constant",
    "build_tape",
    "backward",
    "zero_grad",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv1d",
    "conv1d_output_length",
    "leaky_relu",
    "silu",
    "softmax_segmented",
    "mean_axis",
    "sum_axis",
    "concat",
    "log",
    "exp",
    "square",
    "transpose",
    "reshape",
    "broadcast_to",
    "gather_rows",
    "scatter_rows",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeMismatch(BridgeflowError):
    """Operand shapes are incompatible for the requested operation."""


class NonFinite(BridgeflowError):
    """An operation produced NaN or infinity."""


class NonScalarLoss(BridgeflowError):
    """backward() requires a single-element loss tensor."""


class Tensor:
    """A double-precision array plus the bookkeeping reverse mode needs.

    ``grad`` is populated by :func:`backward` for every node that
    ``requires_grad`` (directly or through a parent)."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
        _op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFinite(f"non-finite values entering '{_op}'")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- conveniences -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a single element, shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, _op="detach")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def parameter(data) -> Tensor:
    """A trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, _op="param")


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False, _op="const")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), _op="const")


# -- broadcasting (leading axes only) ---------------------------------

def _suffix_of(small: tuple, big: tuple) -> bool:
    return small == big[len(big) - len(small):]


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) < len(sb) and _suffix_of(sa, sb):
        return
    if len(sb) < len(sa) and _suffix_of(sb, sa):
        return
    raise ShapeMismatch(
        f"{op}: shapes {sa} and {sb} differ beyond leading-axis expansion"
    )


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum the leading axes a broadcast introduced."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float64)
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _result(data, parents: Sequence[Tensor], op: str,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=needs,
        _parents=tuple(parents),
        _backward=backward_fn if needs else None,
        _op=op,
    )


# -- elementwise arithmetic -------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), "add", back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def back(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), "sub", back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def back(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), "mul", back)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFinite("log: non-positive input")
    out_data = np.log(a.data)

    def back(g):
        _accumulate(a, g / a.data)

    return _result(out_data, (a,), "log", back)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFinite below
        out_data = np.exp(a.data)

    def back(g):
        _accumulate(a, g * out_data)

    return _result(out_data, (a,), "exp", back)


def square(a) -> Tensor:
    a = _as_tensor(a)

    def back(g):
        _accumulate(a, 2.0 * g * a.data)

    return _result(a.data * a.data, (a,), "square", back)


# -- activations -------------------------------------------------------

def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    positive = a.data > 0
    out_data = np.where(positive, a.data, slope * a.data)

    def back(g):
        _accumulate(a, g * np.where(positive, 1.0, slope))

    return _result(out_data, (a,), "leaky_relu", back)


def silu(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # exp(-x) saturates to 0 gain for x << 0
        sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def back(g):
        _accumulate(a, g * sig * (1.0 + a.data * (1.0 - sig)))

    return _result(out_data, (a,), "silu", back)


# -- linear algebra -----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(
            f"matmul: expects 2-D operands, got {a.shape} @ {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner extents differ, {a.shape} @ {b.shape}")

    def back(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), "matmul", back)


def conv1d_output_length(t: int, kernel: int, stride: int, padding: int) -> int:
    return (t + 2 * padding - kernel) // stride + 1


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Temporal convolution of ``x`` [B, C_in, T] with ``weight``
    [C_out, C_in, K] (+ optional bias [C_out]) via explicit im2col."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias_t = None if bias is None else _as_tensor(bias)
    if stride < 1:
        raise ShapeMismatch(f"conv1d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeMismatch(f"conv1d: padding must be >= 0, got {padding}")
    if x.data.ndim != 3 or weight.data.ndim != 3:
        raise ShapeMismatch(
            f"conv1d: expects x [B,C,T] and weight [O,C,K], got {x.shape}, {weight.shape}"
        )
    batch, c_in, t_len = x.shape
    c_out, c_in_w, kernel = weight.shape
    if c_in != c_in_w:
        raise ShapeMismatch(f"conv1d: channel mismatch {c_in} vs {c_in_w}")
    if bias_t is not None and bias_t.shape != (c_out,):
        raise ShapeMismatch(f"conv1d: bias shape {bias_t.shape} != ({c_out},)")
    length = conv1d_output_length(t_len, kernel, stride, padding)
    if length < 1:
        raise ShapeMismatch(
            f"conv1d: kernel {kernel} with stride {stride}, padding {padding} "
            f"does not fit input length {t_len}"
        )
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding)))
    # im2col: rows are flattened receptive fields, columns follow weight layout.
    windows = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=2)
    windows = windows[:, :, ::stride, :]  # [B, C_in, L, K]
    cols = windows.transpose(0, 2, 1, 3).reshape(batch, length, c_in * kernel)
    w2 = weight.data.reshape(c_out, c_in * kernel)
    out_data = np.matmul(cols, w2.T).transpose(0, 2, 1)  # [B, C_out, L]
    if bias_t is not None:
        out_data = out_data + bias_t.data[None, :, None]

    def back(g):
        g_l = g.transpose(0, 2, 1)  # [B, L, C_out]
        if weight.requires_grad:
            gw2 = g_l.reshape(-1, c_out).T @ cols.reshape(-1, c_in * kernel)
            _accumulate(weight, gw2.reshape(c_out, c_in, kernel))
        if bias_t is not None:
            _accumulate(bias_t, g.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(g_l, w2)  # [B, L, C_in*K]
            gcols = gcols.reshape(batch, length, c_in, kernel)
            gxp = np.zeros((batch, c_in, t_len + 2 * padding))
            for k in range(kernel):
                stop = k + stride * (length - 1) + 1
                gxp[:, :, k:stop:stride] += gcols[:, :, :, k].transpose(0, 2, 1)
            if padding:
                gxp = gxp[:, :, padding:-padding]
            _accumulate(x, gxp)

    parents = (x, weight) if bias_t is None else (x, weight, bias_t)
    return _result(out_data, parents, "conv1d", back)


# -- segment softmax -----------------------------------------------------

def softmax_segmented(scores, segment_ids, n_segments: Optional[int] = None) -> Tensor:
    """Softmax within groups of rows sharing a segment id.

    ``scores`` is [n] or [n, H] (independent softmax per trailing column);
    ``segment_ids`` is an integer vector indexing axis 0. Each non-empty
    segment's probabilities sum to 1."""
    scores = _as_tensor(scores)
    ids = np.asarray(segment_ids)
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeMismatch("softmax_segmented: segment_ids must be a 1-D integer array")
    if scores.data.ndim not in (1, 2) or scores.shape[0] != ids.shape[0]:
        raise ShapeMismatch(
            f"softmax_segmented: scores {scores.shape} vs {ids.shape[0]} segment ids"
        )
    if ids.size and ids.min() < 0:
        raise ShapeMismatch("softmax_segmented: negative segment id")
    n_seg = int(ids.max()) + 1 if ids.size else 0
    if n_segments is not None:
        if n_segments < n_seg:
            raise ShapeMismatch(
                f"softmax_segmented: n_segments {n_segments} < max id {n_seg - 1}"
            )
        n_seg = n_segments
    tail = scores.shape[1:]
    m = np.full((n_seg,) + tail, -np.inf)
    np.maximum.at(m, ids, scores.data)
    shifted = np.exp(scores.data - m[ids])
    denom = np.zeros((n_seg,) + tail)
    np.add.at(denom, ids, shifted)
    probs = shifted / denom[ids]

    def back(g):
        seg_dot = np.zeros((n_seg,) + tail)
        np.add.at(seg_dot, ids, g * probs)
        _accumulate(scores, probs * (g - seg_dot[ids]))

    return _result(probs, (scores,), "softmax_segmented", back)


# -- reductions / shape ops ----------------------------------------------

def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeMismatch(f"{op}: axis {axis} out of range for {ndim}-D tensor")
    return axis % ndim


def sum_axis(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.data.ndim, "sum_axis")

    def back(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _result(a.data.sum(axis=axis), (a,), "sum_axis", back)


def mean_axis(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.data.ndim, "mean_axis")
    extent = a.shape[axis]

    def back(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape) / extent)

    return _result(a.data.mean(axis=axis), (a,), "mean_axis", back)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeMismatch("concat: needs at least one tensor")
    axis = _norm_axis(axis, parts[0].data.ndim, "concat")
    for p in parts[1:]:
        if p.data.ndim != parts[0].data.ndim:
            raise ShapeMismatch("concat: rank mismatch")
        for d in range(p.data.ndim):
            if d != axis and p.shape[d] != parts[0].shape[d]:
                raise ShapeMismatch(
                    f"concat: shapes {parts[0].shape} and {p.shape} differ off-axis"
                )
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(sl)])

    return _result(np.concatenate([p.data for p in parts], axis=axis),
                   tuple(parts), "concat", back)


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeMismatch(f"transpose: {axes} is not a permutation of axes")
    inverse = np.argsort(axes)

    def back(g):
        _accumulate(a, g.transpose(inverse))

    return _result(a.data.transpose(axes), (a,), "transpose", back)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeMismatch(f"reshape: {a.shape} -> {tuple(shape)}: {err}") from None

    def back(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(out_data, (a,), "reshape", back)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if not _suffix_of(a.shape, shape):
        raise ShapeMismatch(
            f"broadcast_to: {a.shape} is not a trailing suffix of {shape}"
        )

    def back(g):
        _accumulate(a, g)  # _accumulate sums the leading axes

    return _result(np.broadcast_to(a.data, shape).copy(), (a,), "broadcast", back)


def gather_rows(a, index) -> Tensor:
    """Select rows: out[i] = a[index[i]] (duplicates allowed)."""
    a = _as_tensor(a)
    idx = np.asarray(index)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeMismatch("gather_rows: index must be a 1-D integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeMismatch(
            f"gather_rows: index out of range for {a.shape[0]} rows"
        )

    def back(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accumulate(a, ga)

    return _result(a.data[idx], (a,), "gather_rows", back)


def scatter_rows(a, index, n_rows: int) -> Tensor:
    """Sum rows of ``a`` into ``n_rows`` bins: out[j] = sum over index==j."""
    a = _as_tensor(a)
    idx = np.asarray(index)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeMismatch("scatter_rows: index must be a 1-D integer array")
    if idx.shape[0] != a.shape[0]:
        raise ShapeMismatch(
            f"scatter_rows: {a.shape[0]} rows but {idx.shape[0]} indices"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ShapeMismatch(f"scatter_rows: index out of range for {n_rows} bins")
    out_data = np.zeros((n_rows,) + a.shape[1:])
    np.add.at(out_data, idx, a.data)

    def back(g):
        _accumulate(a, g[idx])

    return _result(out_data, (a,), "scatter_rows", back)


# -- tape and reverse pass ------------------------------------------------

def build_tape(root: Tensor) -> list:
    """Topological order of the graph below ``root`` (parents first)."""
    tape: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            tape.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return tape


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from ``loss`` that
    requires gradients. Visits each node exactly once, deterministically."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be a single element, shape {loss.shape}")
    tape = build_tape(loss)
    for node in tape:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path, params: dict, meta: Optional[dict] = None) -> None:
    """Write named arrays as a JSON manifest plus little-endian f64 blob."""
    arrays = {
        name: (p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64))
        for name, p in params.items()
    }
    _io.write_bundle(path, arrays, meta or {})


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read back (name -> ndarray, meta)."""
    return _io.read_bundle(path)
