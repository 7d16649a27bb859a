"""Layers built on the tape in :mod:`aesmpn.numerics`.

Layers own their weights as :class:`Parameter` objects (plain numpy arrays
with a dotted path name). A forward pass binds them into a graph with
``graph.param``; gradients come back keyed by the same path names.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .numerics import (
    DimensionError,
    Graph,
    Tensor,
    add,
    concat,
    linear,
    mul,
    reduce_sum,
    lstm_fused,
    reshape,
    selu,
    slice_cols,
    sub,
    transpose,
)

CHECKPOINT_FORMAT = "aesmpn-checkpoint"
CHECKPOINT_VERSION = 1


class Parameter:
    __slots__ = ("name", "value")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.array(value, dtype=np.float64)

    def bind(self, g: Graph) -> Tensor:
        return g.param(self.value, self.name)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def init_params(shape, seed=None, *, rng: np.random.Generator | None = None, bias: bool = False) -> np.ndarray:
    """Weight init: N(0, 1/fan_in), fan_in being the last extent. Biases are zero.

    Pass either an integer ``seed`` or a shared ``rng``.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if bias:
        return np.zeros(shape)
    if rng is None:
        if seed is None:
            raise ValueError("init_params needs a seed or an rng")
        rng = np.random.default_rng(seed)
    fan_in = shape[-1]
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


class Module:
    def parameters(self) -> list[Parameter]:
        out = []
        for value in vars(self).values():
            if isinstance(value, Parameter):
                out.append(value)
            elif isinstance(value, Module):
                out.extend(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        out.extend(item.parameters())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise DimensionError(f"parameter set mismatch: missing={missing} unexpected={extra}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise DimensionError(f"{name}: checkpoint shape {value.shape} vs model shape {p.value.shape}")
            p.value = np.array(value)


def _as_rows(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 1:
        return reshape(x, (1, x.shape[0])), True
    return x, False


class LinearLayer(Module):
    """Affine map ``W x + b`` with ``W`` of shape (out, in)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.W = Parameter(f"{name}.W", init_params((out_dim, in_dim), rng=rng))
        self.b = Parameter(f"{name}.b", init_params(out_dim, bias=True))

    def forward(self, g: Graph, x: Tensor) -> Tensor:
        """Apply to a vector (in,) or to a batch of row vectors (n, in)."""
        rows, squeeze = _as_rows(x)
        if rows.shape[1] != self.in_dim:
            raise DimensionError(f"{self.W.name}: input extent {rows.shape[1]} != {self.in_dim}")
        out = linear(rows, transpose(self.W.bind(g)), self.b.bind(g))
        return reshape(out, (self.out_dim,)) if squeeze else out


class AutoEncoder(Module):
    """Linear encoder/decoder pair; no activation on either side."""

    def __init__(self, in_dim: int, latent: int, rng: np.random.Generator, name: str):
        self.encoder = LinearLayer(in_dim, latent, rng, f"{name}.encoder")
        self.decoder = LinearLayer(latent, in_dim, rng, f"{name}.decoder")

    @property
    def in_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def latent(self) -> int:
        return self.encoder.out_dim

    def encode(self, g: Graph, x: Tensor) -> Tensor:
        return self.encoder.forward(g, x)

    def decode(self, g: Graph, z: Tensor) -> Tensor:
        return self.decoder.forward(g, z)

    def loss(self, g: Graph, batch) -> Tensor:
        """Summed squared reconstruction error over the batch."""
        x = batch if isinstance(batch, Tensor) else _stack(batch)
        if x.shape[0] == 0:
            raise ValueError("ae loss on an empty batch")
        diff = sub(x, self.decode(g, self.encode(g, x)))
        return reduce_sum(mul(diff, diff))


def _stack(batch) -> Tensor:
    rows = [np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64) for b in batch]
    if not rows:
        raise ValueError("ae loss on an empty batch")
    return Tensor(np.vstack(rows))


def ae_encode(g: Graph, ae: AutoEncoder, x: Tensor) -> Tensor:
    return ae.encode(g, x)


def ae_decode(g: Graph, ae: AutoEncoder, z: Tensor) -> Tensor:
    return ae.decode(g, z)


def ae_loss(g: Graph, ae: AutoEncoder, batch) -> Tensor:
    return ae.loss(g, batch)


class LSTMCell(Module):
    """LSTM cell whose gates read the concatenation ``[h_prev, x]``.

    The four gate matrices are stacked into one product per step and the
    whole step runs as a single ``lstm_fused`` node on the packed state
    ``[h, c]``.
    """

    GATES = ("f", "i", "o", "C")  # stacking order expected by lstm_fused

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, name: str):
        self.in_dim, self.hidden = in_dim, hidden
        self.name = name
        for gate in self.GATES:
            setattr(self, f"W_{gate}", Parameter(f"{name}.W_{gate}", init_params((hidden, hidden + in_dim), rng=rng)))
            setattr(self, f"b_{gate}", Parameter(f"{name}.b_{gate}", init_params(hidden, bias=True)))
        self.calls = 0

    def _fused(self, g: Graph) -> tuple[Tensor, Tensor]:
        # all four gates in one product; built once per graph
        key = (id(self), "fused")
        if key not in g.cache:
            W = concat([getattr(self, f"W_{k}").bind(g) for k in self.GATES], axis=0)
            b = concat([getattr(self, f"b_{k}").bind(g) for k in self.GATES], axis=0)
            g.cache[key] = (transpose(W), b)
        return g.cache[key]

    def step_packed(self, g: Graph, hc_prev: Tensor, x: Tensor) -> Tensor:
        """One step on packed ``[h, c]`` rows (n, 2H); returns the new packed state."""
        if hc_prev.ndim != 2 or hc_prev.shape[1] != 2 * self.hidden or x.shape != (hc_prev.shape[0], self.in_dim):
            raise DimensionError(
                f"{self.name}: state {hc_prev.shape}, x {x.shape} for hidden={self.hidden}, in={self.in_dim}"
            )
        self.calls += 1
        Wt, b = self._fused(g)
        return lstm_fused(hc_prev, x, Wt, b)

    def step(self, g: Graph, h_prev: Tensor, c_prev: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
        """One step for a vector or a batch of rows; returns ``(h, c)``."""
        h_rows, squeeze = _as_rows(h_prev)
        c_rows, _ = _as_rows(c_prev)
        x_rows, _ = _as_rows(x)
        H = self.hidden
        if h_rows.shape[1] != H or c_rows.shape != h_rows.shape or x_rows.shape != (h_rows.shape[0], self.in_dim):
            raise DimensionError(
                f"{self.name}: h {h_prev.shape}, c {c_prev.shape}, x {x.shape} "
                f"for hidden={H}, in={self.in_dim}"
            )
        hc = self.step_packed(g, concat([h_rows, c_rows], axis=1), x_rows)
        h, c = slice_cols(hc, 0, H), slice_cols(hc, H, 2 * H)
        if squeeze:
            return reshape(h, (H,)), reshape(c, (H,))
        return h, c


def lstm_step(g: Graph, cell: LSTMCell, h_prev: Tensor, c_prev: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
    return cell.step(g, h_prev, c_prev, x)


class SkipMLP(Module):
    """Residual readout: ``u <- SELU(W u + b) + u`` per hidden layer, then a scalar head.

    With ``residual=False`` the hidden layers are plain ``SELU(W u + b)``.
    """

    def __init__(self, width: int, depth: int, rng: np.random.Generator, name: str, residual: bool = True):
        self.width = width
        self.residual = residual
        self.hidden_layers = [LinearLayer(width, width, rng, f"{name}.hidden{j}") for j in range(depth)]
        self.head = LinearLayer(width, 1, rng, f"{name}.head")

    @property
    def depth(self) -> int:
        return len(self.hidden_layers)

    def forward(self, g: Graph, x_p: Tensor, trace: list | None = None) -> Tensor:
        """Map (d,) to (1,) or (n, d) to (n, 1); ``trace`` collects each block's output."""
        u = x_p
        if u.shape[-1] != self.width:
            raise DimensionError(f"readout width {self.width}, input {x_p.shape}")
        for layer in self.hidden_layers:
            r = selu(layer.forward(g, u))
            u = add(r, u) if self.residual else r
            if trace is not None:
                trace.append(u)
        return self.head.forward(g, u)


def skip_forward(g: Graph, block: SkipMLP, x_p: Tensor) -> Tensor:
    return block.forward(g, x_p)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a JSON checkpoint: ``{format, version, meta, params: {path: {shape, values}}}``.

    Floats are written with ``repr`` precision so a load returns the exact
    bits. The file is written to a temporary name and renamed into place.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(value.shape), "values": [float(v) for v in np.asarray(value).reshape(-1)]}
            for name, value in sorted(params.items())
        },
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = {}
    for name, entry in doc["params"].items():
        values = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape)):
            raise ValueError(f"{path}: {name} has {values.size} values for shape {shape}")
        params[name] = values.reshape(shape)
    return params, doc.get("meta", {})
