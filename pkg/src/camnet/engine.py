"""Reverse-mode autodiff on an explicit tape.

Values are numpy arrays wrapped in :class:`Tensor`. While a :class:`Graph`
is active (see :func:`record`), every operation appends a node to it;
without an active graph, operations evaluate eagerly and return detached
tensors. Arrays held by tensors are never mutated by engine operations, so
a recorded tape can be replayed or differentiated at any later point.

Training runs in 32-bit floats; gradient-check suites build everything in
64-bit by passing ``dtype=np.float64`` to the tensor factories.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, ShapeError

DEFAULT_DTYPE = np.float32

# When enabled, every op asserts its output is finite (debug builds only;
# a NaN/Inf on finite inputs is an engine defect, not a user error).
DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    global DEBUG_CHECKS
    DEBUG_CHECKS = bool(enabled)


class Tensor:
    """N-dimensional float array, optionally bound to a node of a recorded graph."""

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data: np.ndarray, graph: "Graph | None" = None,
                 node_id: int | None = None):
        self.data = data
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.graph is not None else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{tag})"


def tensor(data, dtype=None) -> Tensor:
    """Create a detached tensor; floats default to ``DEFAULT_DTYPE``."""
    arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr)


def detach(x: Tensor) -> Tensor:
    """Same values, no graph parent; gradients do not flow through."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# Op registry
# ---------------------------------------------------------------------------

# forward(values, attrs) -> (out_value, ctx)
# backward(grad, parent_values, out_value, ctx, attrs) -> per-parent grads
#   (None for parents that need no gradient)


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    backward: Callable


OPS: dict[str, OpDef] = {}


def _register(name: str, forward: Callable, backward: Callable) -> None:
    OPS[name] = OpDef(forward, backward)


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    ctx: tuple
    attrs: dict


class Graph:
    """Append-only tape of operations; parents always precede children."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaf_ids: dict[int, int] = {}
        self._leaf_refs: list[Tensor] = []  # pin tensors so id() stays unique

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, t: Tensor) -> int:
        """Attach a detached tensor as a leaf; repeated use maps to one node."""
        if t.graph is self and t.node_id is not None:
            return t.node_id
        nid = self._leaf_ids.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), t.data, (), {}))
            self._leaf_ids[id(t)] = nid
            self._leaf_refs.append(t)
        return nid

    def _append(self, op: str, parents: tuple[int, ...], value: np.ndarray,
                ctx: tuple, attrs: dict) -> int:
        self.nodes.append(Node(op, parents, value, ctx, attrs))
        return len(self.nodes) - 1

    def _sweep(self, start: int, seed: np.ndarray, stop: int = 0,
               expand_stop: bool = True) -> dict[int, np.ndarray]:
        """Distribute gradients from node ``start`` down to node ``stop``.

        Path sums accumulate; with ``expand_stop=False`` the stop node is
        treated as a leaf (used by grad-w.r.t.-intermediate queries).
        """
        grads: dict[int, np.ndarray] = {start: seed}
        for nid in range(start, stop - 1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.op == "leaf" or (nid == stop and not expand_stop):
                continue
            values = [self.nodes[p].value for p in node.parents]
            pgrads = OPS[node.op].backward(g, values, node.value, node.ctx, node.attrs)
            for pid, pg in zip(node.parents, pgrads):
                if pg is None:
                    continue
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg
        return grads

    def backward(self, loss: Tensor) -> "GradientStore":
        """Gradients of a scalar loss w.r.t. every node it reaches."""
        if loss.graph is not self or loss.node_id is None:
            raise GraphError("backward() needs a tensor recorded on this graph")
        if loss.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
        return GradientStore(self, self._sweep(loss.node_id, seed))

    def grad_wrt(self, score: Tensor, target: Tensor) -> tuple[Tensor, bool]:
        """d(score)/d(target) as a detached tensor, plus a connectivity flag.

        When ``target`` is not an ancestor of ``score`` the result is a zero
        tensor and the flag is False (no error: some wirings legitimately
        produce disconnected scores).
        """
        if score.graph is not self or score.node_id is None:
            raise GraphError("grad_wrt() needs a score recorded on this graph")
        if score.data.size != 1:
            raise GraphError(f"grad_wrt() needs a scalar score, got shape {score.shape}")
        target_id = self._node_of(target)
        if target_id is None or target_id > score.node_id:
            return Tensor(np.zeros_like(target.data)), False
        seed = np.ones_like(score.data)
        grads = self._sweep(score.node_id, seed, stop=target_id, expand_stop=False)
        g = grads.get(target_id)
        if g is None:
            return Tensor(np.zeros_like(target.data)), False
        return Tensor(g), True

    def _node_of(self, t: Tensor) -> Optional[int]:
        """Node id of a tensor on this graph: op outputs directly, leaves
        through the attachment memo."""
        if t.graph is self and t.node_id is not None:
            return t.node_id
        return self._leaf_ids.get(id(t))

    def replay(self) -> list[np.ndarray]:
        """Re-execute the tape from its leaves; returns all node values."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "leaf":
                values.append(node.value)
            else:
                out, _ = OPS[node.op].forward([values[p] for p in node.parents],
                                              node.attrs)
                values.append(out)
        return values


class GradientStore:
    """Maps node ids (and the tensors bound to them) to gradient arrays."""

    def __init__(self, graph: Graph, grads: dict[int, np.ndarray]):
        self.graph = graph
        self._grads = grads

    def by_id(self, node_id: int) -> Optional[np.ndarray]:
        return self._grads.get(node_id)

    def wrt(self, t: Tensor) -> Optional[np.ndarray]:
        """Gradient for a tensor used in the recorded computation, else None."""
        nid = self.graph._node_of(t)
        return None if nid is None else self._grads.get(nid)


_STATE = threading.local()


def _stack() -> list[Graph]:
    if not hasattr(_STATE, "stack"):
        _STATE.stack = []
    return _STATE.stack


def active_graph() -> Optional[Graph]:
    stack = _stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def record(graph: Graph | None = None):
    """Open a tape; ops executed inside are recorded onto it."""
    g = graph if graph is not None else Graph()
    stack = _stack()
    stack.append(g)
    try:
        yield g
    finally:
        stack.pop()


def backward(loss: Tensor) -> GradientStore:
    if loss.graph is None:
        raise GraphError("loss has no recorded graph; run the forward pass under record()")
    return loss.graph.backward(loss)


def grad_wrt(score: Tensor, target: Tensor) -> tuple[Tensor, bool]:
    if score.graph is None:
        raise GraphError("score has no recorded graph; run the forward pass under record()")
    return score.graph.grad_wrt(score, target)


def _apply(op: str, inputs: list[Tensor], **attrs) -> Tensor:
    values = [t.data for t in inputs]
    out, ctx = OPS[op].forward(values, attrs)
    if DEBUG_CHECKS and not np.all(np.isfinite(out)):
        raise AssertionError(f"non-finite output from op {op!r}")
    g = active_graph()
    if g is None:
        return Tensor(out)
    parents = tuple(g.leaf(t) for t in inputs)
    nid = g._append(op, parents, out, ctx, attrs)
    return Tensor(out, g, nid)


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def _add_fwd(values, attrs):
    a, b = values
    _same_shape(a, b, "add")
    return a + b, ()


def _add_bwd(grad, values, out, ctx, attrs):
    return grad, grad


_register("add", _add_fwd, _add_bwd)


def _mul_fwd(values, attrs):
    a, b = values
    _same_shape(a, b, "mul")
    return a * b, ()


def _mul_bwd(grad, values, out, ctx, attrs):
    a, b = values
    return grad * b, grad * a


_register("mul", _mul_fwd, _mul_bwd)


def _scale_fwd(values, attrs):
    (a,) = values
    return a * a.dtype.type(attrs["factor"]), ()


def _scale_bwd(grad, values, out, ctx, attrs):
    return (grad * grad.dtype.type(attrs["factor"]),)


_register("scale", _scale_fwd, _scale_bwd)


def _relu_fwd(values, attrs):
    (a,) = values
    return np.maximum(a, a.dtype.type(0)), ()


def _relu_bwd(grad, values, out, ctx, attrs):
    # derivative at exactly 0 is 0
    return (grad * (out > 0),)


_register("relu", _relu_fwd, _relu_bwd)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # branch per sign so exp() never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_fwd(values, attrs):
    (a,) = values
    return _stable_sigmoid(a), ()


def _sigmoid_bwd(grad, values, out, ctx, attrs):
    return (grad * out * (1 - out),)


_register("sigmoid", _sigmoid_fwd, _sigmoid_bwd)


def _sum_all_fwd(values, attrs):
    (a,) = values
    return np.asarray(a.sum(), dtype=a.dtype), ()


def _sum_all_bwd(grad, values, out, ctx, attrs):
    (a,) = values
    return (np.broadcast_to(grad, a.shape).astype(a.dtype, copy=True),)


_register("sum_all", _sum_all_fwd, _sum_all_bwd)


def _select_column_fwd(values, attrs):
    (a,) = values
    if a.ndim != 2:
        raise ShapeError(f"select_column: need a 2-d input, got shape {a.shape}")
    c = attrs["column"]
    if not 0 <= c < a.shape[1]:
        raise ShapeError(f"select_column: column {c} out of range for shape {a.shape}")
    return a[:, c].copy(), ()


def _select_column_bwd(grad, values, out, ctx, attrs):
    (a,) = values
    g = np.zeros_like(a)
    g[:, attrs["column"]] = grad
    return (g,)


_register("select_column", _select_column_fwd, _select_column_bwd)


def _flatten_fwd(values, attrs):
    (a,) = values
    return a.reshape(a.shape[0], -1).copy(), ()


def _flatten_bwd(grad, values, out, ctx, attrs):
    (a,) = values
    return (grad.reshape(a.shape),)


_register("flatten", _flatten_fwd, _flatten_bwd)


# ---------------------------------------------------------------------------
# Affine / spatial ops
# ---------------------------------------------------------------------------


def _linear_fwd(values, attrs):
    x, w, b = values
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with weight {w.shape}")
    return x @ w.T + b, ()


def _linear_bwd(grad, values, out, ctx, attrs):
    x, w, b = values
    return grad @ w, grad.T @ x, grad.sum(axis=0)


_register("linear", _linear_fwd, _linear_bwd)


def _conv_geometry(h, w, kh, kw, stride, padding):
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel ({kh}x{kw}) larger than padded input ({hp}x{wp})")
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


def _conv2d_fwd(values, attrs):
    x, w, b = values
    stride, padding = attrs["stride"], attrs["padding"]
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input/weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    k, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(
            f"conv2d: input channels {x.shape} do not match weight channels {w.shape}")
    if b.shape != (k,):
        raise ShapeError(f"conv2d: bias {b.shape} incompatible with weight {w.shape}")
    oh, ow = _conv_geometry(h, wd, kh, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: [N, OH*OW, C*kh*kw] (cross-correlation, no kernel flip)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)
    w2 = w.reshape(k, c * kh * kw)
    out = (cols @ w2.T).transpose(0, 2, 1).reshape(n, k, oh, ow) + b[None, :, None, None]
    return out, (cols,)


def _conv2d_bwd(grad, values, out, ctx, attrs):
    x, w, b = values
    (cols,) = ctx
    stride, padding = attrs["stride"], attrs["padding"]
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    oh, ow = grad.shape[2], grad.shape[3]
    gflat = grad.reshape(n, k, oh * ow).transpose(0, 2, 1)  # [N, L, K]
    dw = np.einsum("nlk,nlp->kp", gflat, cols).reshape(w.shape)
    db = grad.sum(axis=(0, 2, 3))
    dcols = gflat @ w.reshape(k, -1)  # [N, L, C*kh*kw]
    dcols = dcols.reshape(n, oh, ow, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
    return dx, dw, db


_register("conv2d", _conv2d_fwd, _conv2d_bwd)


def _maxpool2d_fwd(values, attrs):
    (x,) = values
    window, stride = attrs["window"], attrs["stride"]
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: need a 4-d input, got shape {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(
            f"maxpool2d: window {window} larger than input spatial extents {(h, w)}")
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    n_, c_, oh, ow = win.shape[:4]
    flat = win.reshape(n, c, oh, ow, window * window)
    # argmax picks the first (row-major) maximal element: deterministic ties
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0].copy()
    return out, (arg,)


def _maxpool2d_bwd(grad, values, out, ctx, attrs):
    (x,) = values
    (arg,) = ctx
    window, stride = attrs["window"], attrs["stride"]
    n, c, oh, ow = grad.shape
    dx = np.zeros_like(x)
    ni, ci, hi, wi = np.indices((n, c, oh, ow), sparse=False)
    rows = hi * stride + arg // window
    cols = wi * stride + arg % window
    np.add.at(dx, (ni, ci, rows, cols), grad)
    return (dx,)


_register("maxpool2d", _maxpool2d_fwd, _maxpool2d_bwd)


def _gap_fwd(values, attrs):
    (x,) = values
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: need a 4-d input, got shape {x.shape}")
    return x.mean(axis=(2, 3)), ()


def _gap_bwd(grad, values, out, ctx, attrs):
    (x,) = values
    n, c, h, w = x.shape
    scale = x.dtype.type(1.0 / (h * w))
    return (np.broadcast_to(grad[:, :, None, None] * scale, x.shape).copy(),)


_register("global_avg_pool", _gap_fwd, _gap_bwd)


def _wcs_fwd(values, attrs):
    x, w = values
    if x.ndim != 4 or w.ndim != 3 or x.shape[0] != w.shape[0] or x.shape[1] != w.shape[2]:
        raise ShapeError(
            f"weighted_channel_sum: maps {x.shape} incompatible with weights {w.shape}")
    return np.einsum("nck,nkhw->nchw", w, x, optimize=True), ()


def _wcs_bwd(grad, values, out, ctx, attrs):
    x, w = values
    dx = np.einsum("nck,nchw->nkhw", w, grad, optimize=True)
    dw = np.einsum("nchw,nkhw->nck", grad, x, optimize=True)
    return dx, dw


_register("weighted_channel_sum", _wcs_fwd, _wcs_bwd)


def _spatial_softmax_fwd(values, attrs):
    (x,) = values
    if x.ndim != 4:
        raise ShapeError(f"spatial_softmax: need a 4-d input, got shape {x.shape}")
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    shifted = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    # floor keeps every entry strictly positive when exp() underflows
    np.maximum(s, np.finfo(x.dtype).tiny, out=s)
    return s.reshape(x.shape), ()


def _spatial_softmax_bwd(grad, values, out, ctx, attrs):
    n, c, h, w = out.shape
    s = out.reshape(n, c, h * w)
    g = grad.reshape(n, c, h * w)
    dot = (g * s).sum(axis=-1, keepdims=True)
    return ((s * (g - dot)).reshape(out.shape),)


_register("spatial_softmax", _spatial_softmax_fwd, _spatial_softmax_bwd)


# Binary cross-entropy over probabilities: sum over classes, mean over batch.
# Predictions are clamped to [eps, 1-eps]; the clamp passes zero gradient.
BCE_EPS = 1e-7


def _bce_fwd(values, attrs):
    p, y = values
    if p.shape != y.shape:
        raise ShapeError(f"bce: prediction shape {p.shape} and target shape {y.shape} differ")
    p2 = p.reshape(1, -1) if p.ndim == 1 else p.reshape(p.shape[0], -1)
    y2 = y.reshape(p2.shape)
    eps = p.dtype.type(BCE_EPS)
    pc = np.clip(p2, eps, 1 - eps)
    ll = y2 * np.log(pc) + (1 - y2) * np.log(1 - pc)
    return np.asarray(-ll.sum(axis=1).mean(), dtype=p.dtype), ()


def _bce_bwd(grad, values, out, ctx, attrs):
    p, y = values
    batch = 1 if p.ndim == 1 else p.shape[0]
    eps = p.dtype.type(BCE_EPS)
    inside = (p > eps) & (p < 1 - eps)
    pc = np.clip(p, eps, 1 - eps)
    dp = np.where(inside, (pc - y) / (pc * (1 - pc)), p.dtype.type(0))
    return grad * dp / p.dtype.type(batch), None


_register("bce", _bce_fwd, _bce_bwd)


# ---------------------------------------------------------------------------
# Public op wrappers
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return _apply("add", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _apply("mul", [a, b])


def scale(x: Tensor, factor: float) -> Tensor:
    return _apply("scale", [x], factor=float(factor))


def relu(x: Tensor) -> Tensor:
    return _apply("relu", [x])


def sigmoid(x: Tensor) -> Tensor:
    return _apply("sigmoid", [x])


def sum_all(x: Tensor) -> Tensor:
    return _apply("sum_all", [x])


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def select_column(x: Tensor, column: int) -> Tensor:
    return _apply("select_column", [x], column=int(column))


def flatten(x: Tensor) -> Tensor:
    return _apply("flatten", [x])


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return _apply("linear", [x, weight, bias])


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    return _apply("conv2d", [x, weight, bias], stride=int(stride), padding=int(padding))


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    return _apply("maxpool2d", [x], window=int(window), stride=int(stride))


def global_avg_pool(x: Tensor) -> Tensor:
    return _apply("global_avg_pool", [x])


def weighted_channel_sum(x: Tensor, weights: Tensor) -> Tensor:
    """Per-sample channel mixing: out[n,c] = sum_k weights[n,c,k] * x[n,k]."""
    return _apply("weighted_channel_sum", [x, weights])


def spatial_softmax(x: Tensor) -> Tensor:
    """Softmax over the two trailing spatial axes, per (sample, channel)."""
    return _apply("spatial_softmax", [x])


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Negated binary cross-entropy: class sum, batch mean, >= 0 always."""
    return _apply("bce", [pred, target])
