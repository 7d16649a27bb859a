"""Adam on per-flow MAPE, metrics, and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import STREAM_SHUFFLE, NormalizationSpec, substream
from .model import AESMPN, NetworkSample, forward, predict
from .nn import Module
from .numerics import Graph, NumericError, Tensor, abs_op, mul, reduce_mean, sub

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("model", "train_mape", "val_mape", "test_mape", "mae", "mse", "msle")
LOSS_COLUMNS = ("epoch", "train_mape", "val_mape")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- metrics


def _pair(targets, preds) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    if y.shape != p.shape or y.size == 0:
        raise ValueError(f"need equal, non-empty lengths, got {y.size} and {p.size}")
    return y, p


def mape(targets, preds) -> float:
    """Mean absolute percentage error, in percent."""
    y, p = _pair(targets, preds)
    if (y == 0).any():
        raise ValueError("MAPE undefined for zero targets")
    return float(100.0 * np.mean(np.abs(y - p) / np.abs(y)))


def mae(targets, preds) -> float:
    y, p = _pair(targets, preds)
    return float(np.mean(np.abs(y - p)))


def mse(targets, preds) -> float:
    y, p = _pair(targets, preds)
    return float(np.mean((y - p) ** 2))


def msle(targets, preds) -> float:
    y, p = _pair(targets, preds)
    if (y <= -1).any() or (p <= -1).any():
        raise ValueError("MSLE needs all values > -1")
    return float(np.mean((np.log1p(y) - np.log1p(p)) ** 2))


@dataclass
class MetricsReport:
    split: str
    mape_pct: float
    mae: float
    mse: float
    msle: float

    @classmethod
    def compute(cls, split: str, targets, preds) -> "MetricsReport":
        return cls(split, mape(targets, preds), mae(targets, preds), mse(targets, preds), msle(targets, preds))


def mape_loss(pred: Tensor, targets: np.ndarray) -> Tensor:
    """Differentiable MAPE (percent) of one sample's flows."""
    y = np.asarray(targets, dtype=np.float64)
    return mul(reduce_mean(mul(abs_op(sub(pred, Tensor(y))), Tensor(1.0 / np.abs(y)))), Tensor(100.0))


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update. ``params`` arrays are updated in place and returned."""
    missing = set(params) - set(grads)
    if missing:
        raise KeyError(f"no gradient for {sorted(missing)}")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} vs parameter {theta.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += eps
        step = m / bc1
        step *= lr
        step /= denom
        theta -= step
    return params


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    clip_norm: float = 5.0
    ae_pretrain: bool = False
    ae_pretrain_steps: int = 200

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass
class EpochRecord:
    epoch: int
    train_mape: float
    val_mape: float


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_params: dict[str, np.ndarray]
    final_params: dict[str, np.ndarray]


def _snapshot(model: Module) -> dict[str, np.ndarray]:
    return {k: np.array(v) for k, v in model.state_dict().items()}


def _flatten(model: Module) -> tuple[np.ndarray, np.ndarray, dict[str, tuple[int, int]]]:
    """Move every parameter into one buffer so an Adam step is a handful of array ops.

    Each ``Parameter.value`` becomes a view into the returned buffer.
    """
    ps = list(model.parameters())
    flat = np.concatenate([p.value.ravel() for p in ps])
    spans, start = {}, 0
    for p in ps:
        stop = start + p.value.size
        spans[p.name] = (start, stop)
        p.value = flat[start:stop].reshape(p.value.shape)
        start = stop
    return flat, np.zeros_like(flat), spans


def pretrain_autoencoders(model: AESMPN, samples: list[NetworkSample], cfg: TrainConfig) -> dict[str, float]:
    """Reconstruction pre-training of the three encoders on the training features.

    Returns the final summed squared reconstruction loss of each autoencoder.
    """
    final = {}
    for name, ae, rows in (
        ("ae_f", model.ae_f, np.vstack([s.flow_features for s in samples])),
        ("ae_l2", model.ae_l2, np.vstack([s.l2_features for s in samples])),
        ("ae_l3", model.ae_l3, np.vstack([s.l3_features for s in samples])),
    ):
        state = AdamState()
        params = {p.name: p.value for p in ae.parameters()}
        batch = Tensor(rows)
        loss_value = float("nan")
        for _ in range(cfg.ae_pretrain_steps):
            g = Graph()
            loss = ae.loss(g, batch)
            loss_value = loss.item()
            adam_step(state, params, g.backward(loss), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
        final[name] = loss_value
    return final


def split_mape(model: AESMPN, samples: list[NetworkSample]) -> float:
    """MAPE over all flows of a split, in the model's (normalized) delay space."""
    targets = np.concatenate([s.targets for s in samples])
    preds = np.concatenate([predict(model, s) for s in samples])
    return mape(targets, preds)


def train(
    model: AESMPN,
    train_samples: list[NetworkSample],
    val_samples: list[NetworkSample],
    cfg: TrainConfig,
    progress=None,
) -> TrainResult:
    """Per-sample Adam on MAPE; samples must already be normalized.

    ``train_mape`` in the history is the mean per-sample loss seen during
    the epoch; ``val_mape`` is evaluated after the epoch. The parameters of
    the epoch with the lowest validation MAPE are kept as ``best_params``.
    """
    if not train_samples:
        raise ValueError("empty training split")
    if cfg.ae_pretrain:
        losses = pretrain_autoencoders(model, train_samples, cfg)
        log.info("autoencoder pre-training: %s", losses)
    rng = substream(cfg.seed, STREAM_SHUFFLE)
    flat, flat_grad, spans = _flatten(model)
    params = {"all": flat}
    state = AdamState()
    history: list[EpochRecord] = []
    best_val, best_epoch, best = math.inf, 0, _snapshot(model)

    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for k in rng.permutation(len(train_samples)):
            sample = train_samples[int(k)]
            try:
                g = Graph()
                loss = mape_loss(forward(g, model, sample), sample.targets)
                grads = g.backward(loss)
                # decoders are not part of the prediction graph: their slots stay
                # zero, so Adam's step for them is exactly zero
                for name, (a, b) in spans.items():
                    if name in grads:
                        flat_grad[a:b] = grads[name].ravel()
                grad_norm = clip_by_global_norm({"all": flat_grad}, cfg.clip_norm)
                if not math.isfinite(grad_norm):
                    raise NumericError("non-finite gradient")
            except NumericError as exc:
                raise TrainingError(f"epoch {epoch}, sample {sample.sample_id!r}: {exc}") from exc
            adam_step(state, params, {"all": flat_grad}, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
            losses.append(loss.item())
        train_mape = float(np.mean(losses))
        val_mape = split_mape(model, val_samples) if val_samples else math.nan
        history.append(EpochRecord(epoch, train_mape, val_mape))
        log.info("epoch %d train_mape %.4f val_mape %.4f", epoch, train_mape, val_mape)
        if progress is not None:
            progress(history[-1])
        if val_samples and val_mape < best_val:
            best_val, best_epoch, best = val_mape, epoch, _snapshot(model)
    if not val_samples:
        best_epoch, best = cfg.epochs, _snapshot(model)
    return TrainResult(history, best_epoch, best, _snapshot(model))


def evaluate(model: AESMPN, samples: list[NetworkSample], norm: NormalizationSpec, split: str = "") -> MetricsReport:
    """Metrics over every flow of a normalized split, in seconds."""
    if not samples:
        raise ValueError(f"cannot evaluate empty split {split!r}")
    targets = np.concatenate([s.targets for s in samples]) * norm.delay_scale
    preds = np.concatenate([predict(model, s) for s in samples]) * norm.delay_scale
    return MetricsReport.compute(split, targets, preds)


def mean_predictor_mape(train_samples: list[NetworkSample], eval_samples: list[NetworkSample]) -> float:
    """MAPE of predicting the mean training delay for every flow."""
    mean = float(np.concatenate([s.targets for s in train_samples]).mean())
    targets = np.concatenate([s.targets for s in eval_samples])
    return mape(targets, np.full_like(targets, mean))


# ---------------------------------------------------------------- CSV output


def _fmt(x: float) -> str:
    return repr(float(x))


def write_loss_csv(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for r in history:
            w.writerow([r.epoch, _fmt(r.train_mape), _fmt(r.val_mape)])


def metrics_row(model_name: str, train: MetricsReport, val: MetricsReport, test: MetricsReport) -> list[str]:
    return [
        model_name,
        _fmt(train.mape_pct),
        _fmt(val.mape_pct),
        _fmt(test.mape_pct),
        _fmt(test.mae),
        _fmt(test.mse),
        _fmt(test.msle),
    ]


def write_metrics_csv(path, rows: list[list[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        w.writerows(rows)
