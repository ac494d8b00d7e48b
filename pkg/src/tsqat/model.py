"""Encoder-only Transformer forecaster built from quantisable linear layers."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .quant import (FloatRange, QuantError, QuantParams, RangeTracker, Scheme, SchemePolicy,
                    apq_select, check_bits, fake_quantize, params_for)

LAYER_IDS = tuple(f"L{i}" for i in range(1, 9))


@dataclass
class ModelConfig:
    m: int = 7
    n: int = 24
    d_model: int = 64
    d_q: int = 64
    d_k: int = 64
    d_v: int = 64
    d_o: int = 64
    d_ffn: int = 256
    num_heads: int = 4
    dropout: float = 0.2

    def __post_init__(self):
        for name in ("m", "n", "d_model", "d_q", "d_k", "d_v", "d_o", "d_ffn", "num_heads"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.d_q != self.d_k:
            raise ValueError("query and key widths must match")
        if self.d_o != self.d_model:
            raise ValueError("the MHA output width must equal d_model for the skip connection")
        for name in ("d_q", "d_v"):
            if getattr(self, name) % self.num_heads:
                raise ValueError(f"{name} must be divisible by num_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @classmethod
    def square(cls, m=7, n=24, d_model=64, num_heads=4, dropout=0.2) -> "ModelConfig":
        """d_Q = d_K = d_V = d_O = d_model and d_ffn = 4 d_model."""
        return cls(m=m, n=n, d_model=d_model, d_q=d_model, d_k=d_model, d_v=d_model,
                   d_o=d_model, d_ffn=4 * d_model, num_heads=num_heads, dropout=dropout)

    def layer_dims(self) -> dict[str, tuple[int, int]]:
        """(fan_in, fan_out) of every linear layer."""
        d = self.d_model
        return {"L1": (self.m, d), "L2": (d, self.d_q), "L3": (d, self.d_k), "L4": (d, self.d_v),
                "L5": (self.d_v, self.d_o), "L6": (d, self.d_ffn), "L7": (self.d_ffn, d),
                "L8": (d, 1)}


@dataclass(frozen=True)
class ParamCount:
    total: int
    linear: int

    @property
    def linear_fraction(self) -> float:
        return self.linear / self.total


def count_params(config: ModelConfig) -> ParamCount:
    m, n, d = config.m, config.n, config.d_model
    if (config.d_q, config.d_k, config.d_v, config.d_o, config.d_ffn) == (d, d, d, d, 4 * d):
        return ParamCount(total=1 + (11 + m + 4 * n) * d + 12 * d * d,
                          linear=1 + (11 + m) * d + 12 * d * d)
    linear = sum(i * o + o for i, o in config.layer_dims().values())
    return ParamCount(total=linear + 2 * (2 * n * d), linear=linear)


class QuantObject(str, enum.Enum):
    WEIGHTS = "weights"
    BIASES = "biases"
    INPUTS = "inputs"
    OUTPUTS = "outputs"


PARAMETER_OBJECTS = (QuantObject.WEIGHTS, QuantObject.BIASES)
FEATURE_OBJECTS = (QuantObject.INPUTS, QuantObject.OUTPUTS)


@dataclass(frozen=True)
class ObjectSpec:
    bits: int = 8
    policy: SchemePolicy = SchemePolicy.AQ
    enabled: bool = True

    def __post_init__(self):
        check_bits(self.bits)
        object.__setattr__(self, "policy", SchemePolicy(self.policy))


@dataclass(frozen=True)
class QLinearSpec:
    weights: ObjectSpec = ObjectSpec()
    biases: ObjectSpec = ObjectSpec()
    inputs: ObjectSpec = ObjectSpec()
    outputs: ObjectSpec = ObjectSpec()

    def __getitem__(self, obj) -> ObjectSpec:
        return getattr(self, QuantObject(obj).value)

    def with_object(self, obj, **changes) -> "QLinearSpec":
        key = QuantObject(obj).value
        return replace(self, **{key: replace(getattr(self, key), **changes)})

    @classmethod
    def disabled(cls) -> "QLinearSpec":
        off = ObjectSpec(enabled=False)
        return cls(off, off, off, off)


PRESETS = ("all-aq", "all-sq", "sq+aq", "sq+apq", "float", "custom")


@dataclass
class QuantConfiguration:
    layers: dict[str, QLinearSpec] = field(default_factory=dict)
    preset: str = "custom"
    apq_threshold: float = 0.1

    def __post_init__(self):
        missing = set(LAYER_IDS) - set(self.layers)
        if missing:
            raise QuantError(f"quantisation configuration lacks layers {sorted(missing)}")

    def __getitem__(self, layer_id: str) -> QLinearSpec:
        return self.layers[layer_id]

    def with_layer_bits(self, layer_id: str, bits: int) -> "QuantConfiguration":
        spec = self.layers[layer_id]
        for obj in QuantObject:
            spec = spec.with_object(obj, bits=bits)
        return QuantConfiguration({**self.layers, layer_id: spec}, "custom", self.apq_threshold)

    def has_adaptive(self) -> bool:
        return any(spec[o].enabled and spec[o].policy is SchemePolicy.ADAPTIVE
                   for spec in self.layers.values() for o in QuantObject)


def make_preset(preset: str, bits: int = 8, apq_threshold: float = 0.1,
                layer_bits: dict[str, int] | None = None) -> QuantConfiguration:
    """Build one of the named configurations.

    ``layer_bits`` overrides the bit width of individual layers (all four
    objects), e.g. ``{"L8": 8}`` on top of a 4-bit preset.
    """
    key = preset.lower()
    if key not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    param_policy, feature_policy = {
        "all-aq": (SchemePolicy.AQ, SchemePolicy.AQ),
        "all-sq": (SchemePolicy.SQ, SchemePolicy.SQ),
        "sq+aq": (SchemePolicy.SQ, SchemePolicy.AQ),
        "sq+apq": (SchemePolicy.SQ, SchemePolicy.ADAPTIVE),
        "custom": (SchemePolicy.AQ, SchemePolicy.AQ),
        "float": (SchemePolicy.AQ, SchemePolicy.AQ),
    }[key]
    enabled = key != "float"
    layers = {}
    for lid in LAYER_IDS:
        b = (layer_bits or {}).get(lid, bits)
        p = ObjectSpec(b, param_policy, enabled)
        f = ObjectSpec(b, feature_policy, enabled)
        layers[lid] = QLinearSpec(weights=p, biases=p, inputs=f, outputs=f)
    tag = key if not layer_bits else "custom"
    return QuantConfiguration(layers, tag, apq_threshold)


def positional_encoding(n: int, d_model: int) -> np.ndarray:
    if n < 1 or d_model < 1:
        raise ValueError("positional encoding needs positive dimensions")
    pos = np.arange(n, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, two_i / d_model)
    pe = np.zeros((n, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


class QLinear:
    """Linear layer whose weights, biases, inputs and outputs can each be fake-quantised.

    Parameters get their range from the exact current min/max; feature
    vectors use EMA trackers that only move in training mode. Grids always
    include zero. Adaptive objects re-run the symmetry test every time their
    tracker moves, and keep their last decision for evaluation.
    """

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator,
                 spec: QLinearSpec | None = None, name: str = "", dtype=np.float64,
                 ema_momentum: float = 0.99, apq_threshold: float = 0.1,
                 cover_batch: bool = True):
        bound = 1.0 / math.sqrt(fan_in)
        self.name = name
        self.fan_in, self.fan_out = fan_in, fan_out
        self.weight = ad.parameter(rng.uniform(-bound, bound, (fan_in, fan_out)), dtype)
        self.bias = ad.parameter(rng.uniform(-bound, bound, fan_out), dtype)
        self.apq_threshold = apq_threshold
        self.trackers = {
            QuantObject.WEIGHTS: RangeTracker("minmax"),
            QuantObject.BIASES: RangeTracker("minmax"),
            QuantObject.INPUTS: RangeTracker("ema", ema_momentum),
            QuantObject.OUTPUTS: RangeTracker("ema", ema_momentum),
        }
        self.pinned: dict[QuantObject, FloatRange] = {}
        self.cover_batch = cover_batch
        self.schemes: dict[QuantObject, Scheme] = {}
        self.spec = spec or QLinearSpec.disabled()

    @property
    def spec(self) -> QLinearSpec:
        return self._spec

    @spec.setter
    def spec(self, spec: QLinearSpec) -> None:
        self._spec = spec
        self.schemes = {o: Scheme(spec[o].policy.value) for o in QuantObject
                        if spec[o].policy is not SchemePolicy.ADAPTIVE}

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def pin_range(self, obj, beta: float, alpha: float) -> None:
        """Fix an object's float range (tracker updates are then ignored)."""
        self.pinned[QuantObject(obj)] = FloatRange(beta, alpha)

    def observed_range(self, obj) -> FloatRange:
        obj = QuantObject(obj)
        if obj in self.pinned:
            return self.pinned[obj]
        return self.trackers[obj].range

    def resolved_scheme(self, obj) -> Scheme:
        obj = QuantObject(obj)
        if obj not in self.schemes:
            raise QuantError(f"{self.name}.{obj.value}: adaptive scheme not resolved yet")
        return self.schemes[obj]

    def quant_params(self, obj, extra: FloatRange | None = None) -> QuantParams:
        obj = QuantObject(obj)
        spec = self._spec[obj]
        scheme = self.resolved_scheme(obj)
        r = self.observed_range(obj)
        beta, alpha = min(r.beta, 0.0), max(r.alpha, 0.0)
        if extra is not None:
            beta, alpha = min(beta, extra.beta), max(alpha, extra.alpha)
        if beta == alpha:
            beta, alpha = -1e-8, 1e-8
        return params_for(FloatRange(beta, alpha), spec.bits, scheme)

    def refresh_parameter_ranges(self) -> None:
        self.trackers[QuantObject.WEIGHTS].update(self.weight)
        self.trackers[QuantObject.BIASES].update(self.bias)

    def _observe(self, obj: QuantObject, t: Tensor, training: bool) -> None:
        if obj in self.pinned:
            pass
        elif obj in PARAMETER_OBJECTS or training:
            self.trackers[obj].update(t)
        else:
            return
        if training and self._spec[obj].policy is SchemePolicy.ADAPTIVE:
            self.schemes[obj] = apq_select(self.observed_range(obj), self.apq_threshold)

    def _q(self, obj: QuantObject, t: Tensor, training: bool) -> Tensor:
        if not self._spec[obj].enabled:
            return t
        self._observe(obj, t, training)
        extra = None
        if training and self.cover_batch and obj in FEATURE_OBJECTS and obj not in self.pinned:
            extra = FloatRange(float(t.data.min()), float(t.data.max()))
        return fake_quantize(t, self.quant_params(obj, extra))

    def __call__(self, x: Tensor, training: bool = False, quantized: bool = True) -> Tensor:
        if x.shape[-1] != self.fan_in:
            raise ad.ShapeError(f"{self.name}: expected input width {self.fan_in}, got {x.shape}")
        if not quantized:
            return ad.add_bias(ad.matmul(x, self.weight), self.bias)
        x = self._q(QuantObject.INPUTS, x, training)
        w = self._q(QuantObject.WEIGHTS, self.weight, training)
        b = self._q(QuantObject.BIASES, self.bias, training)
        return self._q(QuantObject.OUTPUTS, ad.add_bias(ad.matmul(x, w), b), training)

    def quant_state(self) -> dict:
        return {
            "trackers": {o.value: t.state() for o, t in self.trackers.items()},
            "schemes": {o.value: s.value for o, s in self.schemes.items()},
            "pinned": {o.value: (r.beta, r.alpha) for o, r in self.pinned.items()},
        }

    def load_quant_state(self, state: dict) -> None:
        self.trackers = {QuantObject(k): RangeTracker.from_state(v)
                         for k, v in state["trackers"].items()}
        self.schemes = {QuantObject(k): Scheme(v) for k, v in state["schemes"].items()}
        self.pinned = {QuantObject(k): FloatRange(*v) for k, v in state.get("pinned", {}).items()}


def attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over (batch, n, width) tensors."""
    b, n, width_k = q.shape
    dk = width_k // num_heads
    dv = v.shape[-1] // num_heads

    def split(t, width):
        return ad.transpose(ad.reshape(t, (b, n, num_heads, width)), (0, 2, 1, 3))

    qh, kh, vh = split(q, dk), split(k, dk), split(v, dv)
    scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    ctx = ad.matmul(ad.softmax_rows(scores), vh)
    return ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, num_heads * dv))


class TransformerForecaster:
    """L1 + PE -> MHA (L2..L5) -> add & LN -> FFN (L6, L7) -> add & LN -> pool -> L8."""

    def __init__(self, config: ModelConfig | None = None, qconfig: QuantConfiguration | None = None,
                 seed: int = 0, dtype=np.float64, ema_momentum: float = 0.99,
                 cover_batch: bool = True):
        self.config = config or ModelConfig()
        self.seed = seed
        self.dtype = dtype
        init_rng = np.random.default_rng(seed)
        self.dropout_rng = np.random.default_rng([seed, 1])
        self.layers = {lid: QLinear(i, o, init_rng, name=lid, dtype=dtype,
                              ema_momentum=ema_momentum, cover_batch=cover_batch)
                       for lid, (i, o) in self.config.layer_dims().items()}
        n, d = self.config.n, self.config.d_model
        self.pe = positional_encoding(n, d).astype(dtype)
        self.ln1_gain = ad.parameter(np.ones((n, d)), dtype)
        self.ln1_bias = ad.parameter(np.zeros((n, d)), dtype)
        self.ln2_gain = ad.parameter(np.ones((n, d)), dtype)
        self.ln2_bias = ad.parameter(np.zeros((n, d)), dtype)
        self.training = False
        self.qconfig: QuantConfiguration | None = None
        self.set_qconfig(qconfig)

    # configuration -------------------------------------------------------
    def set_qconfig(self, qconfig: QuantConfiguration | None) -> None:
        self.qconfig = qconfig
        for lid, layer in self.layers.items():
            layer.spec = qconfig[lid] if qconfig else QLinearSpec.disabled()
            layer.apq_threshold = qconfig.apq_threshold if qconfig else 0.1

    @property
    def quantized(self) -> bool:
        return self.qconfig is not None and any(
            spec[o].enabled for spec in self.qconfig.layers.values() for o in QuantObject)

    def train(self) -> "TransformerForecaster":
        self.training = True
        return self

    def eval(self) -> "TransformerForecaster":
        self.training = False
        return self

    # parameters ------------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for lid, layer in self.layers.items():
            out[f"{lid}.weight"] = layer.weight
            out[f"{lid}.bias"] = layer.bias
        out.update({"ln1.gain": self.ln1_gain, "ln1.bias": self.ln1_bias,
                    "ln2.gain": self.ln2_gain, "ln2.bias": self.ln2_bias})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict:
        return {
            "params": {k: p.data.copy() for k, p in self.named_parameters().items()},
            "quant": {lid: layer.quant_state() for lid, layer in self.layers.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        for k, p in self.named_parameters().items():
            p.data[...] = state["params"][k]
        for lid, layer in self.layers.items():
            if lid in state.get("quant", {}):
                layer.load_quant_state(state["quant"][lid])

    # forward ---------------------------------------------------------------
    def forward(self, X, mode: str | None = None) -> Tensor:
        """Predict one value per window. ``X`` is (n, m) or (batch, n, m)."""
        if mode not in (None, "float", "fake-quant"):
            raise ValueError(f"unknown mode {mode!r}")
        quantized = self.quantized if mode is None else mode == "fake-quant"
        x = X if isinstance(X, Tensor) else Tensor(np.asarray(X, dtype=self.dtype))
        single = x.data.ndim == 2
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        cfg = self.config
        if x.shape[1:] != (cfg.n, cfg.m):
            raise ad.ShapeError(f"expected windows of shape ({cfg.n}, {cfg.m}), got {x.shape[1:]}")
        tr = self.training

        def lin(lid, h):
            return self.layers[lid](h, training=tr, quantized=quantized)

        def drop(h):
            return ad.dropout(h, cfg.dropout, self.dropout_rng, tr)

        emb = drop(ad.add_const(lin("L1", x), self.pe))
        attn = self._attention(lin("L2", emb), lin("L3", emb), lin("L4", emb))
        h = ad.layer_norm(ad.add(emb, drop(lin("L5", attn))), self.ln1_gain, self.ln1_bias)
        ffn = lin("L7", ad.relu(lin("L6", h)))
        h = ad.layer_norm(ad.add(h, drop(ffn)), self.ln2_gain, self.ln2_bias)
        y = lin("L8", ad.mean_pool_rows(h))
        y = ad.reshape(y, (y.shape[0],))
        return ad.reshape(y, ()) if single else y

    __call__ = forward

    def _attention(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        return attention(q, k, v, self.config.num_heads)

    def predict(self, X, batch_size: int = 1024, mode: str | None = None) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            X = np.asarray(X, dtype=self.dtype)
            out = [self.forward(X[i:i + batch_size], mode).data for i in range(0, len(X), batch_size)]
        finally:
            self.training = was
        return np.concatenate(out) if out else np.zeros(0)

    def resolved_configuration(self) -> QuantConfiguration:
        """Copy of the active configuration with adaptive objects replaced by their decisions."""
        if self.qconfig is None:
            return make_preset("float")
        layers = {}
        for lid, spec in self.qconfig.layers.items():
            for obj in QuantObject:
                if spec[obj].enabled and spec[obj].policy is SchemePolicy.ADAPTIVE:
                    scheme = self.layers[lid].resolved_scheme(obj)
                    spec = spec.with_object(obj, policy=SchemePolicy(scheme.value))
            layers[lid] = spec
        return QuantConfiguration(layers, self.qconfig.preset, self.qconfig.apq_threshold)


def apply_preset(model: TransformerForecaster, preset: str, apq_threshold: float = 0.1,
                 bits: int = 8, layer_bits: dict[str, int] | None = None) -> QuantConfiguration:
    qc = make_preset(preset, bits=bits, apq_threshold=apq_threshold, layer_bits=layer_bits)
    model.set_qconfig(qc)
    return qc


def qconfig_to_dict(qc: QuantConfiguration) -> dict:
    return {
        "preset": qc.preset,
        "apq_threshold": qc.apq_threshold,
        "layers": {lid: {o.value: {"bits": spec[o].bits, "policy": spec[o].policy.value,
                                   "enabled": spec[o].enabled} for o in QuantObject}
                   for lid, spec in qc.layers.items()},
    }


def qconfig_from_dict(d: dict) -> QuantConfiguration:
    layers = {}
    for lid, objs in d["layers"].items():
        layers[lid] = QLinearSpec(**{k: ObjectSpec(v["bits"], SchemePolicy(v["policy"]), v["enabled"])
                                     for k, v in objs.items()})
    return QuantConfiguration(layers, d.get("preset", "custom"), d.get("apq_threshold", 0.1))
