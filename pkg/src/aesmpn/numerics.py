"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Graph` is an append-only tape. Every op whose inputs belong to a
graph records a node holding its output and a local gradient rule; constants
(tensors with no graph) take part in the forward computation but receive no
gradient. ``Graph.backward`` walks the tape once in reverse.

Forward matrix products pad the row count up to a multiple of
``ROW_TILE`` before calling GEMM. BLAS kernels handle a partial tile of rows
with different code than a full one, so without padding a row's result can
depend on its position in the matrix; the model needs predictions that are
bit-identical when flows or links are relabelled. 16 is a multiple of the
M-unroll of the OpenBLAS double-precision kernels for current x86 and ARM
targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
ROW_TILE = 16


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    """Immutable float64 array, optionally attached to a graph node."""

    __slots__ = ("data", "graph", "node")

    def __init__(self, data, graph: "Graph | None" = None, node: int = -1):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.graph = graph
        self.node = node

    @classmethod
    def _wrap(cls, arr: np.ndarray, graph: "Graph | None" = None, node: int = -1) -> "Tensor":
        # op outputs are fresh arrays; skip the defensive copy
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data, t.graph, t.node = arr, graph, node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f", node={self.node}" if self.graph is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), like.shape))


GradRule = Callable[[np.ndarray, tuple[bool, ...]], Sequence["np.ndarray | Outer | None"]]


class Outer(NamedTuple):
    """A gradient contribution ``a.T @ b`` whose product is deferred.

    Weight gradients of ops that run many times on few rows arrive as a
    series of thin outer products. ``Graph.backward`` stacks every such
    contribution to one node and forms the sum with a single GEMM.
    """

    a: np.ndarray
    b: np.ndarray


class _Node(NamedTuple):
    op: str
    inputs: tuple[int, ...]
    output: Tensor
    rule: GradRule | None
    needs: tuple[bool, ...]


@dataclass
class Graph:
    """Append-only computation tape.

    ``params`` maps a trainable parameter name to its leaf node id. Node ids
    are positions in ``nodes``, so inputs always precede outputs. With
    ``record=False`` parameters come back as plain constants and nothing is
    taped (inference only).
    """

    nodes: list[_Node] = field(default_factory=list)
    params: dict[str, int] = field(default_factory=dict)
    cache: dict = field(default_factory=dict)
    record: bool = True

    def param(self, value, name: str) -> Tensor:
        """Leaf for a trainable parameter; one node per name per graph."""
        if not self.record:
            key = ("const", name)
            if key not in self.cache:
                self.cache[key] = Tensor(value)
                _check_finite("param", self.cache[key].data)
            return self.cache[key]
        if name in self.params:
            return self.nodes[self.params[name]].output
        t = Tensor(value)
        _check_finite("param", t.data)
        node_id = len(self.nodes)
        t.graph, t.node = self, node_id
        self.nodes.append(_Node("param", (), t, None, ()))
        self.params[name] = node_id
        return t

    def _record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, rule: GradRule) -> Tensor:
        t = Tensor._wrap(out, self, len(self.nodes))
        ids = tuple(x.node if x.graph is self else -1 for x in inputs)
        self.nodes.append(_Node(op, ids, t, rule, tuple(i >= 0 for i in ids)))
        return t

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every registered parameter.

        Parameters the loss does not depend on get an all-zero entry. The
        tape is not modified, so repeated calls return identical maps.
        """
        if loss.graph is not self:
            raise ValueError("loss does not belong to this graph")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list = [None] * (loss.node + 1)
        grads[loss.node] = np.ones_like(loss.data)
        deferred: dict[int, list[Outer]] = {}
        nodes = self.nodes
        for node_id in range(loss.node, -1, -1):
            g = _settle(grads[node_id], deferred.pop(node_id, None))
            if g is None:
                continue
            grads[node_id] = g
            _, inputs, _, rule, needs = nodes[node_id]
            if rule is None:
                continue
            for i, gi in zip(inputs, rule(g, needs)):
                if i < 0 or gi is None:
                    continue
                if isinstance(gi, Outer):
                    deferred.setdefault(i, []).append(gi)
                    continue
                prev = grads[i]
                grads[i] = gi if prev is None else prev + gi
        out = {}
        for name, i in self.params.items():
            g = grads[i] if i <= loss.node else None
            out[name] = np.zeros_like(nodes[i].output.data) if g is None else np.array(g)
        return out


def _settle(dense: np.ndarray | None, outers: list[Outer] | None) -> np.ndarray | None:
    if not outers:
        return dense
    if len(outers) == 1:
        prod = outers[0].a.T @ outers[0].b
    else:
        prod = np.concatenate([o.a for o in outers]).T @ np.concatenate([o.b for o in outers])
    return prod if dense is None else dense + prod


def _graph_of(*xs: Tensor) -> Graph | None:
    graph = None
    for x in xs:
        if x.graph is not None:
            if graph is not None and x.graph is not graph:
                raise ValueError("tensors from different graphs cannot be combined")
            graph = x.graph
    return graph


def _check_finite(op: str, arr: np.ndarray) -> None:
    # a finite sum proves every element finite; otherwise look properly
    if not math.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NumericError(f"{op} produced a non-finite value")


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, rule: GradRule) -> Tensor:
    _check_finite(op, out)
    graph = _graph_of(*inputs)
    if graph is None:
        return Tensor._wrap(out)
    return graph._record(op, inputs, out, rule)


def _row_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # full row tiles only; see module docstring
    m = a.shape[0]
    padded = -(-m // ROW_TILE) * ROW_TILE
    if padded == m:
        return a @ b
    ap = np.zeros((padded, a.shape[1]))
    ap[:m] = a
    return (ap @ b)[:m]


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def rule(g, needs):
        return (g @ B.T if needs[0] else None, A.T @ g if needs[1] else None)

    return _emit("matmul", (a, b), _row_matmul(A, B), rule)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for rows ``x`` (n, k), ``w`` (k, m), bias ``b`` (m,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"linear shape mismatch: {x.shape} x {w.shape} + {b.shape}")
    X, W = x.data, w.data

    def rule(g, needs):
        return (g @ W.T if needs[0] else None, X.T @ g if needs[1] else None, g.sum(axis=0) if needs[2] else None)

    return _emit("linear", (x, w, b), _row_matmul(X, W) + b.data, rule)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {x.shape}")
    return _emit("transpose", (x,), x.data.T, lambda g, needs: (g.T,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} to {shape}") from None
    return _emit("reshape", (x,), out, lambda g, needs: (g.reshape(src),))


# ---------------------------------------------------------------- elementwise


def _broadcast_kind(op: str, a: Tensor, b: Tensor) -> bool:
    """True when ``b`` is a bias vector added to every row of ``a``."""
    if a.shape == b.shape:
        return False
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return True
    raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    bias = _broadcast_kind("add", a, b)

    def rule(g, needs):
        return (g, g.sum(axis=0) if bias else g)

    return _emit("add", (a, b), a.data + b.data, rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    bias = _broadcast_kind("sub", a, b)

    def rule(g, needs):
        return (g, -(g.sum(axis=0) if bias else g))

    return _emit("sub", (a, b), a.data - b.data, rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    bias = _broadcast_kind("mul", a, b)
    A, B = a.data, b.data

    def rule(g, needs):
        gb = None
        if needs[1]:
            gb = (g * A).sum(axis=0) if bias else g * A
        return (g * B if needs[0] else None, gb)

    return _emit("mul", (a, b), A * B, rule)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    return _emit("scale", (x,), x.data * c, lambda g, needs: (g * c,))


def abs_op(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _emit("abs", (x,), np.abs(x.data), lambda g, needs: (g * s,))


def _sigmoid(X: np.ndarray) -> np.ndarray:
    # branch-wise form: exp only ever sees non-positive arguments
    e = np.exp(-np.abs(X))
    r = 1.0 / (1.0 + e)
    return np.where(X >= 0, r, e * r)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _emit("sigmoid", (x,), out, lambda g, needs: (g * out * (1.0 - out),))


def tanh_op(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit("tanh", (x,), out, lambda g, needs: (g * (1.0 - out * out),))


def selu(x: Tensor) -> Tensor:
    X = x.data
    pos = X > 0
    neg_exp = np.exp(np.minimum(X, 0.0))
    out = np.where(pos, SELU_LAMBDA * X, SELU_LAMBDA * SELU_ALPHA * (neg_exp - 1.0))
    slope = np.where(pos, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * neg_exp)
    return _emit("selu", (x,), out, lambda g, needs: (g * slope,))


# ---------------------------------------------------------------- structure


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise DimensionError("concat of an empty list")
    ndim = parts[0].ndim
    if any(p.ndim != ndim for p in parts):
        raise DimensionError(f"concat rank mismatch: {[p.shape for p in parts]}")
    ax = axis % ndim
    try:
        out = np.concatenate([p.data for p in parts], axis=ax)
    except ValueError:
        raise DimensionError(f"concat extent mismatch on axis {ax}: {[p.shape for p in parts]}") from None
    edges = np.concatenate(([0], np.cumsum([p.shape[ax] for p in parts]))).tolist()
    spans = list(zip(edges[:-1], edges[1:]))

    def rule(g, needs):
        if ax == 0:
            return [g[a:b] for a, b in spans]
        return [g[..., a:b] if ax == ndim - 1 else np.take(g, range(a, b), axis=ax) for a, b in spans]

    return _emit("concat", parts, out, rule)


_GATE_SCALE: dict[int, np.ndarray] = {}


def _lstm_gates(Z: np.ndarray, C0: np.ndarray, H: int):
    # sigmoid(z) = (1 + tanh(z/2)) / 2, so one tanh call covers all four gates
    scale = _GATE_SCALE.get(H)
    if scale is None:
        scale = _GATE_SCALE[H] = np.concatenate([np.full(3 * H, 0.5), np.ones(H)])
    t = np.tanh(Z * scale)
    gates, ct = t[:, : 3 * H], t[:, 3 * H :]
    gates *= 0.5
    gates += 0.5
    f, i, o = gates[:, :H], gates[:, H : 2 * H], gates[:, 2 * H :]
    c = f * C0 + i * ct
    tc = np.tanh(c)
    return np.concatenate([o * tc, c], axis=1), (gates, f, i, o, ct, tc)


def _lstm_gates_grad(g: np.ndarray, C0: np.ndarray, H: int, saved) -> tuple[np.ndarray, np.ndarray]:
    gates, f, i, o, ct, tc = saved
    gh, gc = g[:, :H], g[:, H:]
    gc = gc + gh * o * (1.0 - tc * tc)
    dgates = np.concatenate([gc * C0, gc * ct, gh * tc], axis=1) * gates * (1.0 - gates)
    dz = np.concatenate([dgates, gc * i * (1.0 - ct * ct)], axis=1)
    return dz, gc * f


def lstm_pointwise(z: Tensor, c_prev: Tensor) -> Tensor:
    """Elementwise half of an LSTM step, as one tape node.

    ``z`` (n, 4H) holds gate pre-activations in the order forget, input,
    output, candidate (the three sigmoid gates first, so they share one
    call). Returns ``[h, c]`` side by side, shape (n, 2H), with
    ``c = f*c_prev + i*tanh(z_C)`` and ``h = o*tanh(c)``.
    """
    n, H = c_prev.shape if c_prev.ndim == 2 else (-1, -1)
    if z.ndim != 2 or c_prev.ndim != 2 or z.shape != (n, 4 * H):
        raise DimensionError(f"lstm_pointwise: z {z.shape} with c_prev {c_prev.shape}")
    C0 = c_prev.data
    out, saved = _lstm_gates(z.data, C0, H)

    def rule(g, needs):
        return _lstm_gates_grad(g, C0, H, saved)

    return _emit("lstm_pointwise", (z, c_prev), out, rule)


def lstm_fused(hc_prev: Tensor, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """A whole LSTM step on packed state, as one tape node.

    ``hc_prev`` is ``[h, c]`` of shape (n, 2H), ``x`` is (n, in), ``w`` is the
    stacked gate matrix (H + in, 4H) laid out for ``[h, x] @ w`` with gates
    in the order of :func:`lstm_pointwise`, ``b`` is (4H,). Returns the new
    ``[h, c]``. Equivalent to concat, :func:`linear` and
    :func:`lstm_pointwise` in sequence.
    """
    if hc_prev.ndim != 2 or x.ndim != 2 or w.ndim != 2:
        raise DimensionError(f"lstm_fused: state {hc_prev.shape}, x {x.shape}, w {w.shape}")
    n, H2 = hc_prev.shape
    H = H2 // 2
    if H2 % 2 or x.shape[0] != n or w.shape != (H + x.shape[1], 4 * H) or b.shape != (4 * H,):
        raise DimensionError(f"lstm_fused: state {hc_prev.shape}, x {x.shape}, w {w.shape}, b {b.shape}")
    HC, W = hc_prev.data, w.data
    inp = np.concatenate([HC[:, :H], x.data], axis=1)
    C0 = HC[:, H:]
    out, saved = _lstm_gates(_row_matmul(inp, W) + b.data, C0, H)

    def rule(g, needs):
        dz, dc = _lstm_gates_grad(g, C0, H, saved)
        d_hc = d_x = None
        if needs[0] or needs[1]:
            d_inp = dz @ W.T
            d_hc = np.concatenate([d_inp[:, :H], dc], axis=1)
            d_x = d_inp[:, H:]
        return (d_hc, d_x, Outer(inp, dz) if needs[2] else None, dz.sum(axis=0) if needs[3] else None)

    return _emit("lstm_fused", (hc_prev, x, w, b), out, rule)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not 0 <= start <= stop <= x.shape[0]:
        raise DimensionError(f"bad row slice [{start}:{stop}] of {x.shape}")
    shape = x.shape

    def rule(g, needs):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _emit("slice_rows", (x,), x.data[start:stop], rule)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"bad column slice [{start}:{stop}] of {x.shape}")
    shape = x.shape

    def rule(g, needs):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice_cols", (x,), x.data[:, start:stop], rule)


def gather_rows(x: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.intp)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range for {n} rows")
    shape = x.shape

    def rule(g, needs):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("gather_rows", (x,), x.data[idx], rule)


def put_rows(base: Tensor, index, values: Tensor) -> Tensor:
    """Copy of ``base`` with rows ``index`` replaced by ``values``."""
    idx = np.asarray(index, dtype=np.intp)
    if values.shape != (idx.size,) + base.shape[1:]:
        raise DimensionError(f"put_rows: {values.shape} rows into {base.shape} at {idx.size} indices")
    if np.unique(idx).size != idx.size:
        raise ValueError("put_rows indices must be distinct")
    out = np.array(base.data)
    out[idx] = values.data

    def rule(g, needs):
        gb = np.array(g)
        gb[idx] = 0.0
        return (gb, g[idx])

    return _emit("put_rows", (base, values), out, rule)


def segment_sum(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``x`` that share a segment id.

    Within each segment the contributions are sorted per column before being
    added, so the result does not depend on the order of the rows.
    """
    seg = np.asarray(segment_ids, dtype=np.intp)
    if x.ndim != 2 or seg.shape != (x.shape[0],):
        raise DimensionError(f"segment_sum: ids {seg.shape} for rows of {x.shape}")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise IndexError(f"segment id out of range for {num_segments} segments")
    width = x.shape[1]
    out = np.zeros((num_segments, width))
    if seg.size:
        order = np.argsort(seg, kind="stable")
        counts = np.bincount(seg, minlength=num_segments)
        starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
        slot = np.arange(seg.size) - starts[seg[order]]
        padded = np.zeros((num_segments, counts.max(), width))
        padded[seg[order], slot] = x.data[order]
        padded.sort(axis=1)
        out = padded.sum(axis=1)

    def rule(g, needs):
        return (g[seg],)

    return _emit("segment_sum", (x,), out, rule)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {shape}")
    out = x.data.sum(axis=axis)

    def rule(g, needs):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("reduce_sum", (x,), out, rule)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    n = x.data.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------- gradient check


def grad_check(
    build: Callable[[Graph, dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max relative error between ``backward`` and central differences.

    ``build(graph, tensors)`` must return a scalar loss; ``tensors`` holds a
    graph leaf for each entry of ``params``. Per coordinate the error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; ``floor``
    keeps coordinates with vanishing gradient from dividing by zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value(p):
        g = Graph()
        return float(build(g, {k: g.param(v, k) for k, v in p.items()}).data)

    g = Graph()
    loss = build(g, {k: g.param(v, k) for k, v in base.items()})
    analytic = g.backward(loss)

    worst = 0.0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value(base)
            flat[i] = orig - eps
            down = value(base)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
