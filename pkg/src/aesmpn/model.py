"""AE-SMPN: autoencoder features, LSTM message passing, skip-connected readout.

Every entity kind is processed as a batch of rows: flows, L2 links and L3
links each live in one (count, 2 * hidden) matrix of packed LSTM state
``[h, c]``, and the per-hop LSTM of the
flow phase runs once per hop position over the flows that are still active
at that hop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable

import numpy as np

from .nn import AutoEncoder, LinearLayer, LSTMCell, Module, SkipMLP
from .numerics import (
    DimensionError,
    Graph,
    Tensor,
    concat,
    gather_rows,
    mul,
    put_rows,
    reshape,
    segment_sum,
    slice_cols,
    slice_rows,
)

FLOW_FEATURES = ("traffic_rate", "packet_rate", "packet_size", "flow_type")
L2_FEATURES = ("capacity",)
L3_FEATURES = ("capacity",)

MODEL_PRESETS = {
    "ae-mpnn": {"readout_depth": 0, "residual": False},
    "ae-smpn2": {"readout_depth": 2},
    "ae-smpn3": {"readout_depth": 3},
    "ae-smpn4": {"readout_depth": 4},
}


class SampleError(ValueError):
    pass


@dataclass(eq=False)
class NetworkSample:
    """One topology snapshot.

    ``l2_features`` (n2, d2), ``l3_features`` (n3, d3) and ``flow_features``
    (nf, df) hold one row per entity; ``paths[f]`` is the ordered list of
    ``(l2, l3)`` hops of flow ``f`` and ``targets[f]`` its mean delay.
    ``topology`` and ``flow_endpoints`` carry descriptive metadata that the
    model ignores.
    """

    l2_features: np.ndarray
    l3_features: np.ndarray
    flow_features: np.ndarray
    paths: list[list[tuple[int, int]]]
    targets: np.ndarray
    sample_id: str = ""
    topology: Any = None  # data.TopologySpec when loaded or generated
    flow_endpoints: list[tuple[int, int]] | None = None
    flow_types: list[str] | None = None

    def __post_init__(self):
        self.l2_features = np.atleast_2d(np.asarray(self.l2_features, dtype=np.float64))
        self.l3_features = np.atleast_2d(np.asarray(self.l3_features, dtype=np.float64))
        ff = np.asarray(self.flow_features, dtype=np.float64)
        if ff.ndim != 2:
            ff = ff.reshape(len(self.paths), -1) if self.paths else ff.reshape(0, 0)
        self.flow_features = ff
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        self.paths = [[(int(a), int(b)) for a, b in p] for p in self.paths]

    @property
    def num_flows(self) -> int:
        return len(self.paths)

    @property
    def num_l2(self) -> int:
        return self.l2_features.shape[0]

    @property
    def num_l3(self) -> int:
        return self.l3_features.shape[0]

    def validate(self) -> None:
        if self.num_flows == 0:
            raise SampleError(f"sample {self.sample_id!r}: no flows")
        if self.targets.shape != (self.num_flows,):
            raise SampleError(f"sample {self.sample_id!r}: {self.targets.size} targets for {self.num_flows} flows")
        for name in ("l2_features", "l3_features", "flow_features", "targets"):
            if not np.isfinite(getattr(self, name)).all():
                raise SampleError(f"sample {self.sample_id!r}: non-finite {name}")
        for f, path in enumerate(self.paths):
            if not path:
                raise SampleError(f"sample {self.sample_id!r}: flow {f} has an empty path")
            for l2, l3 in path:
                if not (0 <= l2 < self.num_l2 and 0 <= l3 < self.num_l3):
                    raise SampleError(
                        f"sample {self.sample_id!r}: flow {f} hop ({l2},{l3}) out of range "
                        f"({self.num_l2} L2 links, {self.num_l3} L3 links)"
                    )
        bad = np.flatnonzero(self.targets <= 0)
        if bad.size:
            raise SampleError(f"sample {self.sample_id!r}: flow {int(bad[0])} has non-positive target delay")

    @cached_property
    def index(self) -> "PathIndex":
        return PathIndex.build(self)


@dataclass
class PathIndex:
    """Gather/scatter index arrays derived from a sample's paths."""

    hops: list[tuple[np.ndarray, np.ndarray, np.ndarray]]  # per hop position: flows, l2, l3
    hop_flow: np.ndarray
    hop_l2: np.ndarray
    hop_l3: np.ndarray
    path_len: np.ndarray
    pair_l2: np.ndarray
    pair_l3: np.ndarray

    @classmethod
    def build(cls, sample: NetworkSample) -> "PathIndex":
        lens = np.array([len(p) for p in sample.paths], dtype=np.intp)
        hops = []
        for j in range(int(lens.max(initial=0))):
            active = np.flatnonzero(lens > j)
            l2 = np.array([sample.paths[f][j][0] for f in active], dtype=np.intp)
            l3 = np.array([sample.paths[f][j][1] for f in active], dtype=np.intp)
            hops.append((active, l2, l3))
        if hops:
            hop_flow = np.concatenate([h[0] for h in hops])
            hop_l2 = np.concatenate([h[1] for h in hops])
            hop_l3 = np.concatenate([h[2] for h in hops])
        else:
            hop_flow = hop_l2 = hop_l3 = np.zeros(0, dtype=np.intp)
        pairs = sorted({(int(a), int(b)) for a, b in zip(hop_l2, hop_l3)})
        pair_l2 = np.array([p[0] for p in pairs], dtype=np.intp)
        pair_l3 = np.array([p[1] for p in pairs], dtype=np.intp)
        return cls(hops, hop_flow, hop_l2, hop_l3, lens, pair_l2, pair_l3)


@dataclass
class ModelConfig:
    K: int = 8
    hidden: int = 64
    latent: int = 64
    readout_depth: int = 2
    residual: bool = True
    flow_dim: int = len(FLOW_FEATURES)
    l2_dim: int = len(L2_FEATURES)
    l3_dim: int = len(L3_FEATURES)

    def __post_init__(self):
        if self.K < 0:
            raise ValueError(f"K must be >= 0, got {self.K}")
        if self.readout_depth < 0:
            raise ValueError(f"readout_depth must be >= 0, got {self.readout_depth}")
        if self.hidden != self.latent:
            raise ValueError(f"hidden ({self.hidden}) must equal latent ({self.latent}); AE output seeds the state")
        if min(self.hidden, self.flow_dim, self.l2_dim, self.l3_dim) < 1:
            raise ValueError("all widths must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in MODEL_PRESETS:
            raise ValueError(f"unknown model {name!r}; choose from {sorted(MODEL_PRESETS)}")
        return cls(**{**MODEL_PRESETS[name], **overrides})


class AESMPN(Module):
    def __init__(self, config: ModelConfig, seed: int | np.random.Generator = 0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        c = self.config = config
        H = c.hidden
        self.ae_f = AutoEncoder(c.flow_dim, c.latent, rng, "ae_f")
        self.ae_l2 = AutoEncoder(c.l2_dim, c.latent, rng, "ae_l2")
        self.ae_l3 = AutoEncoder(c.l3_dim, c.latent, rng, "ae_l3")
        self.msg_f = LSTMCell(2 * H, H, rng, "msg_f")
        self.upd_l2 = LSTMCell(H, H, rng, "upd_l2")
        self.upd_l3 = LSTMCell(H, H, rng, "upd_l3")
        self.readout_proj = LinearLayer(3 * H, H, rng, "readout.proj")
        self.readout = SkipMLP(H, c.readout_depth, rng, "readout", residual=c.residual)

    def cells(self) -> tuple[LSTMCell, LSTMCell, LSTMCell]:
        return self.msg_f, self.upd_l2, self.upd_l3


@dataclass
class HiddenStates:
    """Packed ``[h, c]`` rows for flows, L2 links and L3 links."""

    hc_f: Tensor
    hc_l2: Tensor
    hc_l3: Tensor
    flow_messages: Tensor | None = field(default=None, repr=False)

    @property
    def hidden(self) -> int:
        return self.hc_f.shape[1] // 2

    # the accessors below add a slice node to the tape on every call
    @property
    def h_f(self) -> Tensor:
        return slice_cols(self.hc_f, 0, self.hidden)

    @property
    def c_f(self) -> Tensor:
        return slice_cols(self.hc_f, self.hidden, 2 * self.hidden)

    @property
    def h_l2(self) -> Tensor:
        return slice_cols(self.hc_l2, 0, self.hidden)

    @property
    def c_l2(self) -> Tensor:
        return slice_cols(self.hc_l2, self.hidden, 2 * self.hidden)

    @property
    def h_l3(self) -> Tensor:
        return slice_cols(self.hc_l3, 0, self.hidden)

    @property
    def c_l3(self) -> Tensor:
        return slice_cols(self.hc_l3, self.hidden, 2 * self.hidden)


def _check_sample(model: AESMPN, sample: NetworkSample) -> None:
    sample.validate()
    c = model.config
    for label, arr, width in (
        ("flow", sample.flow_features, c.flow_dim),
        ("L2", sample.l2_features, c.l2_dim),
        ("L3", sample.l3_features, c.l3_dim),
    ):
        if arr.shape[1] != width:
            raise DimensionError(f"{label} features have {arr.shape[1]} columns, model expects {width}")


def extract_features(g: Graph, model: AESMPN, sample: NetworkSample) -> HiddenStates:
    """Encode every entity with its own autoencoder; cell states start at zero."""
    _check_sample(model, sample)
    H = model.config.hidden

    def packed(ae, feats):
        h = ae.encode(g, Tensor(feats))
        return concat([h, Tensor(np.zeros((feats.shape[0], H)))], axis=1)

    return HiddenStates(
        packed(model.ae_f, sample.flow_features),
        packed(model.ae_l2, sample.l2_features),
        packed(model.ae_l3, sample.l3_features),
    )


def message_passing_round(g: Graph, model: AESMPN, sample: NetworkSample, s: HiddenStates) -> HiddenStates:
    idx = sample.index
    H = model.config.hidden
    h_l2, h_l3 = s.h_l2, s.h_l3

    # flows: LSTM over the hops of each path, input [h_l2, h_l3] of the hop
    hc_f = s.hc_f
    nf = sample.num_flows
    hop_inputs = concat([gather_rows(h_l2, idx.hop_l2), gather_rows(h_l3, idx.hop_l3)], axis=1)
    steps = []
    start = 0
    for active, _, _ in idx.hops:
        stop = start + active.size
        x = slice_rows(hop_inputs, start, stop) if (start, stop) != (0, hop_inputs.shape[0]) else hop_inputs
        if active.size == nf:  # every flow still on its path: no gather/scatter needed
            hc_f = model.msg_f.step_packed(g, hc_f, x)
            steps.append(hc_f)
        else:
            hc = model.msg_f.step_packed(g, gather_rows(hc_f, active), x)
            steps.append(hc)
            hc_f = put_rows(hc_f, active, hc)
        start = stop
    flow_messages = slice_cols(concat(steps, axis=0) if len(steps) > 1 else steps[0], 0, H)

    # L2 links: sum of flow messages per link, one LSTM step
    agg_l2 = segment_sum(flow_messages, idx.hop_l2, sample.num_l2)
    hc_l2 = model.upd_l2.step_packed(g, s.hc_l2, agg_l2)

    # L3 links: sum of fresh L2 states over (l2, l3) pairs seen on any path
    fresh_l2 = slice_cols(hc_l2, 0, H)
    agg_l3 = segment_sum(gather_rows(fresh_l2, idx.pair_l2), idx.pair_l3, sample.num_l3)
    hc_l3 = model.upd_l3.step_packed(g, s.hc_l3, agg_l3)

    return HiddenStates(hc_f, hc_l2, hc_l3, flow_messages)


def readout_input(g: Graph, sample: NetworkSample, s: HiddenStates) -> Tensor:
    """Per flow: ``[h_f, mean h_l2 over path, mean h_l3 over path]``."""
    idx = sample.index
    nf = sample.num_flows
    inv_len = np.repeat((1.0 / idx.path_len)[:, None], s.hidden, axis=1)
    mean_l2 = mul(segment_sum(gather_rows(s.h_l2, idx.hop_l2), idx.hop_flow, nf), Tensor(inv_len))
    mean_l3 = mul(segment_sum(gather_rows(s.h_l3, idx.hop_l3), idx.hop_flow, nf), Tensor(inv_len))
    return concat([s.h_f, mean_l2, mean_l3], axis=1)


def forward(g: Graph, model: AESMPN, sample: NetworkSample, trace: list | None = None) -> Tensor:
    """Predicted (normalized) delay per flow, shape (num_flows,)."""
    states = extract_features(g, model, sample)
    if trace is not None:
        trace.append(states)
    for _ in range(model.config.K):
        states = message_passing_round(g, model, sample, states)
        if trace is not None:
            trace.append(states)
    x_p = model.readout_proj.forward(g, readout_input(g, sample, states))
    y = model.readout.forward(g, x_p)
    return reshape(y, (sample.num_flows,))


def predict(model: AESMPN, sample: NetworkSample) -> np.ndarray:
    return forward(Graph(record=False), model, sample).numpy()


# ---------------------------------------------------------------- reference MPNN


def _tiny_mlp(in_dim: int, out_dim: int, rng: np.random.Generator) -> Callable[[np.ndarray], np.ndarray]:
    W = rng.normal(0, 1 / np.sqrt(in_dim), size=(out_dim, in_dim))
    b = rng.normal(0, 0.1, size=out_dim)
    return lambda x: np.tanh(x @ W.T + b)


def generic_mpnn_reference(
    node_features: np.ndarray,
    edges: list[tuple[int, int]],
    edge_features: np.ndarray | None,
    K: int,
    message_fn: Callable | None = None,
    update_fn: Callable | None = None,
    readout_fn: Callable | None = None,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Textbook sum-aggregation MPNN, used as a test oracle.

    ``edges`` are directed ``(w, v)`` pairs carrying a message from ``w`` to
    ``v``. Each round computes ``m_v = sum_w M(h_v, h_w, e_vw)`` and
    ``h_v <- U(h_v, m_v)``, starting from ``h_v = x_v``; the readout is
    ``R({h_v})``. Missing functions default to small seeded tanh MLPs and a
    sum readout. Returns ``(final node states, readout)``.
    """
    h = np.asarray(node_features, dtype=np.float64)
    n, d = h.shape
    e = np.zeros((len(edges), 0)) if edge_features is None else np.asarray(edge_features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if message_fn is None:
        mlp = _tiny_mlp(2 * d + e.shape[1], d, rng)
        message_fn = lambda hv, hw, evw: mlp(np.concatenate([hv, hw, evw], axis=1))  # noqa: E731
    if update_fn is None:
        mlp_u = _tiny_mlp(2 * d, d, rng)
        update_fn = lambda hv, mv: mlp_u(np.concatenate([hv, mv], axis=1))  # noqa: E731
    if readout_fn is None:
        readout_fn = lambda states: states.sum(axis=0)  # noqa: E731
    src = np.array([w for w, _ in edges], dtype=np.intp)
    dst = np.array([v for _, v in edges], dtype=np.intp)
    for _ in range(K):
        if edges:
            msg = message_fn(h[dst], h[src], e)
            m = segment_sum(Tensor(msg), dst, n).numpy()
        else:
            m = np.zeros((n, d))
        h = update_fn(h, m)
    return h, readout_fn(h)
