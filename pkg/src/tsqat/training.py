"""QAT training loop, Adam, MinMax normalisation and RMSE evaluation."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .model import QuantObject, SchemePolicy, TransformerForecaster

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    dropout: float = 0.2
    patience: int = 10
    apq_threshold: float = 0.1
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be >= 1")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class MinMaxNormalizer:
    """Per-column (x - min) / (max - min), fitted once on training rows.

    Values outside the fitted range are not clipped, so test data can map
    outside [0, 1]. Constant columns map to 0.
    """

    def __init__(self, mins: np.ndarray, maxs: np.ndarray):
        self.mins = np.asarray(mins, dtype=np.float64)
        self.maxs = np.asarray(maxs, dtype=np.float64)
        if np.any(self.maxs < self.mins):
            raise ValueError("normaliser max below min")

    @classmethod
    def fit(cls, train: np.ndarray) -> "MinMaxNormalizer":
        train = np.asarray(train, dtype=np.float64)
        if train.ndim != 2 or len(train) == 0:
            raise ValueError("need a non-empty 2-D training matrix")
        norm = cls(train.min(axis=0), train.max(axis=0))
        if np.any(norm.span == 0):
            warnings.warn("constant column(s) in training data map to 0.0", RuntimeWarning,
                          stacklevel=2)
        return norm

    @property
    def span(self) -> np.ndarray:
        return self.maxs - self.mins

    def _safe_span(self, cols):
        s = self.span[cols]
        return np.where(s == 0, 1.0, s)

    def transform(self, x: np.ndarray, cols=slice(None)) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        s = self.span[cols]
        out = (x - self.mins[cols]) / self._safe_span(cols)
        return np.where(s == 0, 0.0, out)

    def inverse_transform(self, x: np.ndarray, cols=slice(None)) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.span[cols] + self.mins[cols]

    def to_dict(self) -> dict:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MinMaxNormalizer":
        return cls(d["mins"], d["maxs"])


def fit_normalizer(train_matrix: np.ndarray) -> MinMaxNormalizer:
    return MinMaxNormalizer.fit(train_matrix)


@dataclass
class AdamState:
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, config: TrainConfig) -> AdamState:
    """In-place bias-corrected Adam update of ``params`` (numpy arrays)."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return state


@dataclass
class SchemeDecision:
    epoch: int
    batch: int
    layer: str
    obj: str
    beta: float
    alpha: float
    scheme: str


@dataclass
class TrainingHistory:
    loss: list[float] = field(default_factory=list)
    test_rmse: list[float] = field(default_factory=list)
    decisions: list[SchemeDecision] = field(default_factory=list)
    best_epoch: int = -1
    best_loss: float = math.inf
    stopped_early: bool = False

    def final_schemes(self) -> dict[tuple[str, str], str]:
        out = {}
        for d in self.decisions:
            out[(d.layer, d.obj)] = d.scheme
        return out


def _adaptive_objects(model: TransformerForecaster):
    if model.qconfig is None:
        return []
    return [(lid, obj) for lid, spec in model.qconfig.layers.items() for obj in QuantObject
            if spec[obj].enabled and spec[obj].policy is SchemePolicy.ADAPTIVE]


def train_qat(model: TransformerForecaster, X: np.ndarray, y: np.ndarray,
              config: TrainConfig | None = None, X_test=None, y_test=None, normalizer=None,
              target_col: int = -1, callback=None) -> TrainingHistory:
    """Train ``model`` in place with fake quantisation (if configured) and early stopping.

    Each mini-batch: forward (trackers observe, adaptive objects re-decide),
    MSE loss, backward through the straight-through estimator, Adam step.
    Early stopping watches the epoch's mean training loss and restores the
    best epoch's parameters and quantisation state.
    """
    config = config or TrainConfig()
    X = np.asarray(X, dtype=model.dtype)
    y = np.asarray(y, dtype=model.dtype)
    if len(X) == 0:
        raise TrainingError("empty training set")
    if len(X) != len(y):
        raise TrainingError("feature and target counts differ")
    model.config.dropout = config.dropout
    if model.qconfig is not None:
        for layer in model.layers.values():
            layer.apq_threshold = config.apq_threshold
        model.qconfig.apq_threshold = config.apq_threshold
    params = model.parameters()
    state = AdamState()
    order_rng = np.random.default_rng([config.seed, 2])
    model.dropout_rng = np.random.default_rng([config.seed, 1])
    adaptive = _adaptive_objects(model)
    hist = TrainingHistory()
    best_state = model.state_dict()
    stale = 0
    model.train()
    try:
        for epoch in range(config.epochs):
            idx = order_rng.permutation(len(X)) if config.shuffle else np.arange(len(X))
            total, count = 0.0, 0
            for bi, start in enumerate(range(0, len(X), config.batch_size)):
                sel = idx[start:start + config.batch_size]
                ad.zero_grad(params)
                loss = ad.mse_loss(model.forward(X[sel]), y[sel])
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
                loss.backward()
                adam_step([p.data for p in params], [p.grad for p in params], state, config)
                for lid, obj in adaptive:
                    layer = model.layers[lid]
                    r = layer.observed_range(obj)
                    hist.decisions.append(SchemeDecision(epoch, bi, lid, obj.value, r.beta, r.alpha,
                                                         layer.resolved_scheme(obj).value))
                total += value * len(sel)
                count += len(sel)
            epoch_loss = total / count
            hist.loss.append(epoch_loss)
            if X_test is not None:
                hist.test_rmse.append(evaluate_rmse(model, X_test, y_test, normalizer, target_col))
                model.train()
            if epoch_loss < hist.best_loss:
                hist.best_loss, hist.best_epoch = epoch_loss, epoch
                best_state = model.state_dict()
                stale = 0
            else:
                stale += 1
            log.info("epoch %d loss %.6g", epoch, epoch_loss)
            if callback is not None:
                callback(epoch, hist)
            if stale >= config.patience:
                hist.stopped_early = True
                break
    finally:
        model.eval()
    model.load_state_dict(best_state)
    return hist


def rmse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.size == 0:
        raise ValueError("empty prediction set")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def evaluate_rmse(model: TransformerForecaster, X, y, normalizer: MinMaxNormalizer | None = None,
                  target_col: int = -1, predictions=None) -> float:
    """Test RMSE in original target units (dropout off)."""
    if len(X) == 0:
        raise ValueError("empty test set")
    pred = model.predict(X) if predictions is None else np.asarray(predictions)
    y = np.asarray(y, dtype=np.float64)
    if normalizer is not None:
        pred = normalizer.inverse_transform(pred, target_col)
        y = normalizer.inverse_transform(y, target_col)
    return rmse(pred, y)
