"""Finite-difference checks for every differentiable op, layer and the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .model import AESMPN, ModelConfig, NetworkSample, forward
from .nn import AutoEncoder, LinearLayer, LSTMCell, SkipMLP
from .numerics import Graph, Tensor, grad_check

OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    group: str  # "op", "layer" or "model"
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _weighted_sum(y: Tensor, rng: np.random.Generator) -> Tensor:
    # random projection so every output coordinate carries a distinct weight
    return nx.reduce_sum(nx.mul(y, Tensor(rng.normal(size=y.shape))))


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.2) -> np.ndarray:
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, dict[str, np.ndarray]]]:
    n = rng.normal
    H = 3
    return {
        "matmul": (lambda t: nx.matmul(t["a"], t["b"]), {"a": n(size=(3, 4)), "b": n(size=(4, 2))}),
        "linear": (lambda t: nx.linear(t["x"], t["w"], t["b"]), {"x": n(size=(3, 4)), "w": n(size=(4, 2)), "b": n(size=2)}),
        "transpose": (lambda t: nx.transpose(t["x"]), {"x": n(size=(2, 3))}),
        "reshape": (lambda t: nx.reshape(t["x"], (3, 2)), {"x": n(size=(2, 3))}),
        "add": (lambda t: nx.add(t["a"], t["b"]), {"a": n(size=(2, 3)), "b": n(size=(2, 3))}),
        "add_bias": (lambda t: nx.add(t["a"], t["b"]), {"a": n(size=(2, 3)), "b": n(size=3)}),
        "sub": (lambda t: nx.sub(t["a"], t["b"]), {"a": n(size=(2, 3)), "b": n(size=(2, 3))}),
        "mul": (lambda t: nx.mul(t["a"], t["b"]), {"a": n(size=(2, 3)), "b": n(size=(2, 3))}),
        "scale": (lambda t: nx.scale(t["x"], -2.5), {"x": n(size=(2, 3))}),
        "abs": (lambda t: nx.abs_op(t["x"]), {"x": _away_from_zero(rng, (2, 3))}),
        "sigmoid": (lambda t: nx.sigmoid(t["x"]), {"x": 3 * n(size=(2, 3))}),
        "tanh": (lambda t: nx.tanh_op(t["x"]), {"x": 2 * n(size=(2, 3))}),
        "selu": (lambda t: nx.selu(t["x"]), {"x": _away_from_zero(rng, (2, 3))}),
        "concat": (lambda t: nx.concat([t["a"], t["b"]], axis=1), {"a": n(size=(2, 3)), "b": n(size=(2, 1))}),
        "lstm_pointwise": (
            lambda t: nx.lstm_pointwise(t["z"], t["c"]),
            {"z": n(size=(2, 4 * H)), "c": n(size=(2, H))},
        ),
        "lstm_fused": (
            lambda t: nx.lstm_fused(t["hc"], t["x"], t["w"], t["b"]),
            {"hc": n(size=(2, 2 * H)), "x": n(size=(2, 2)), "w": 0.5 * n(size=(H + 2, 4 * H)), "b": n(size=4 * H)},
        ),
        "slice_rows": (lambda t: nx.slice_rows(t["x"], 1, 3), {"x": n(size=(4, 2))}),
        "slice_cols": (lambda t: nx.slice_cols(t["x"], 1, 3), {"x": n(size=(2, 4))}),
        "gather_rows": (lambda t: nx.gather_rows(t["x"], [2, 0, 2, 1]), {"x": n(size=(3, 2))}),
        "put_rows": (lambda t: nx.put_rows(t["a"], [0, 2], t["v"]), {"a": n(size=(3, 2)), "v": n(size=(2, 2))}),
        "segment_sum": (lambda t: nx.segment_sum(t["x"], [1, 0, 1, 1, 3], 4), {"x": n(size=(5, 2))}),
        "reduce_sum": (lambda t: nx.reduce_sum(t["x"], axis=0), {"x": n(size=(3, 2))}),
        "reduce_mean": (lambda t: nx.reduce_mean(t["x"], axis=1), {"x": n(size=(3, 2))}),
    }


def _layer_cases(rng: np.random.Generator):
    x = rng.normal(size=(3, 4))
    lin = LinearLayer(4, 2, rng, "lin")
    ae = AutoEncoder(4, 2, rng, "ae")
    cell = LSTMCell(4, 3, rng, "cell")
    h0, c0 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    mlp = SkipMLP(4, 2, rng, "mlp")
    for layer in mlp.hidden_layers:  # non-zero biases keep SELU away from its kink pattern
        layer.b.value = rng.normal(size=layer.b.value.shape)

    def lstm_loss(g, t, cell=cell):
        h, c = cell.step(g, Tensor(h0), Tensor(c0), Tensor(x))
        return _weighted_sum(nx.concat([h, c], axis=1), np.random.default_rng(7))

    return {
        "LinearLayer": (lin, lambda g, t: _weighted_sum(lin.forward(g, Tensor(x)), np.random.default_rng(1))),
        "AutoEncoder.loss": (ae, lambda g, t: ae.loss(g, Tensor(x))),
        "LSTMCell.step": (cell, lstm_loss),
        "SkipMLP": (mlp, lambda g, t: _weighted_sum(mlp.forward(g, Tensor(x)), np.random.default_rng(2))),
    }


def tiny_sample(rng: np.random.Generator) -> NetworkSample:
    """Two flows over two links; flow 0 crosses both, flow 1 only the second."""
    return NetworkSample(
        l2_features=rng.uniform(size=(2, 1)),
        l3_features=rng.uniform(size=(2, 1)),
        flow_features=rng.uniform(size=(2, 4)),
        paths=[[(0, 0), (1, 1)], [(1, 1)]],
        targets=np.array([1.3, 0.7]),
        sample_id="gradcheck",
    )


def run_suite(eps: float = 1e-5, seed: int = 0, hidden: int = 4, K: int = 2) -> list[CheckResult]:
    """Every op, every layer, then the whole model on a two-flow sample."""
    rng = np.random.default_rng(seed)
    results = []
    for k, (name, (fn, params)) in enumerate(_op_cases(rng).items()):

        def build(g, t, fn=fn, k=k):
            return _weighted_sum(fn(t), np.random.default_rng([seed, k]))

        results.append(CheckResult("op", name, grad_check(build, params, eps=eps), OP_TOL))

    for name, (module, build) in _layer_cases(rng).items():
        results.append(CheckResult("layer", name, _module_check(module, build, eps), OP_TOL))

    model = AESMPN(ModelConfig(K=K, hidden=hidden, latent=hidden, readout_depth=2), seed=seed)
    sample = tiny_sample(rng)

    def model_loss(g, t):
        y = forward(g, model, sample)
        return _weighted_sum(y, np.random.default_rng(3))

    results.append(CheckResult("model", f"AESMPN(K={K}, hidden={hidden})", _module_check(model, model_loss, eps), MODEL_TOL))
    return results


def _module_check(module, build, eps: float) -> float:
    """grad_check over the module parameters that ``build`` actually reaches.

    ``grad_check`` registers each perturbed leaf under the parameter's name
    first, and a graph hands out one leaf per name, so the module's own
    ``bind`` calls pick up the perturbed values.
    """
    params = {p.name: p.value for p in module.parameters()}
    probe = Graph()
    build(probe, {})
    return grad_check(build, {n: params[n] for n in probe.params if n in params}, eps=eps)
