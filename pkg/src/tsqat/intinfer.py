"""Integer-frozen execution of the linear layers.

A frozen layer stores its weights and biases as integers together with the
zero-point-shifted copies ``W_int - z_W`` and ``B_int - z_B``. At inference
the only zero-point work left is ``I_int - z_I`` on the way in and the
``+ z_O`` on the way out:

    O_int = clip(round(acc * s_I s_W / s_O + (B_int - z_B) * s_B / s_O + z_O))
    acc   = (I_int - z_I) @ (W_int - z_W)

Everything between linear layers (PE, attention softmax, layer norm, ReLU,
pooling) runs in float on dequantised values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (LAYER_IDS, ModelConfig, QuantConfiguration, QuantObject,
                    TransformerForecaster, attention, qconfig_to_dict)
from .quant import QuantError, QuantParams, dequantize, fake_quantize_array, quantize


class AccumulatorOverflow(QuantError):
    pass


class ProvenanceError(ValueError):
    pass


ACC_LIMIT = 2 ** 62


def config_digest(config: ModelConfig, qconfig: QuantConfiguration | None) -> bytes:
    payload = {"model": asdict(config), "quant": qconfig_to_dict(qconfig) if qconfig else None}
    payload["model"].pop("dropout", None)
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).digest()


@dataclass
class PackedLinear:
    layer: str
    fan_in: int
    fan_out: int
    params: dict[QuantObject, QuantParams | None]
    weight_int: np.ndarray | None = None
    bias_int: np.ndarray | None = None
    weight_float: np.ndarray | None = None
    bias_float: np.ndarray | None = None
    weight_shifted: np.ndarray | None = field(default=None, repr=False)
    bias_shifted: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.params = {QuantObject(k): v for k, v in self.params.items()}
        pw, pb = self.params.get(QuantObject.WEIGHTS), self.params.get(QuantObject.BIASES)
        if pw is not None:
            self.weight_shifted = (self.weight_int - pw.zero_point).astype(np.int32)
        if pb is not None:
            self.bias_shifted = (self.bias_int - pb.zero_point).astype(np.int32)
        for obj, arr in ((QuantObject.WEIGHTS, self.weight_int), (QuantObject.BIASES, self.bias_int)):
            p = self.params.get(obj)
            if p is not None and arr.size and (arr.min() < p.qmin or arr.max() > p.qmax):
                raise QuantError(f"{self.layer}.{obj.value}: stored integers outside the grid")

    @property
    def integer_only(self) -> bool:
        return all(self.params.get(o) is not None for o in QuantObject)

    def accumulator_bound(self) -> int:
        """Largest |acc| reachable for any in-range input."""
        pi = self.params[QuantObject.INPUTS]
        i_max = max(abs(pi.qmin - pi.zero_point), abs(pi.qmax - pi.zero_point))
        col = np.abs(self.weight_shifted.astype(np.int64)).sum(axis=0)
        return int(i_max) * (int(col.max()) if col.size else 0)

    def weight_values(self) -> np.ndarray:
        if self.weight_int is not None:
            return dequantize(self.weight_int, self.params[QuantObject.WEIGHTS])
        return self.weight_float

    def bias_values(self) -> np.ndarray:
        if self.bias_int is not None:
            return dequantize(self.bias_int, self.params[QuantObject.BIASES])
        return self.bias_float

    def same_as(self, other: "PackedLinear") -> bool:
        def eq(a, b):
            return (a is None and b is None) or (a is not None and b is not None
                                                 and a.dtype == b.dtype and np.array_equal(a, b))
        return (self.layer == other.layer and self.params == other.params
                and all(eq(getattr(self, f), getattr(other, f))
                        for f in ("weight_int", "bias_int", "weight_float", "bias_float")))


@dataclass
class PackedModel:
    config: ModelConfig
    qconfig: QuantConfiguration | None
    layers: dict[str, PackedLinear]
    floats: dict[str, np.ndarray]
    digest: bytes = b""

    def __post_init__(self):
        missing = set(LAYER_IDS) - set(self.layers)
        if missing:
            raise ValueError(f"packed model lacks layers {sorted(missing)}")
        if not self.digest:
            self.digest = config_digest(self.config, self.qconfig)

    def same_as(self, other: "PackedModel") -> bool:
        return (self.digest == other.digest and asdict(self.config) == asdict(other.config)
                and all(self.layers[k].same_as(other.layers[k]) for k in LAYER_IDS)
                and self.floats.keys() == other.floats.keys()
                and all(np.array_equal(self.floats[k], other.floats[k]) for k in self.floats))


def freeze_layer(layer, layer_id: str | None = None) -> PackedLinear:
    """Freeze one QLinear: quantise its parameters with their final params."""
    params: dict[QuantObject, QuantParams | None] = {}
    layer.refresh_parameter_ranges()
    for obj in QuantObject:
        spec = layer.spec[obj]
        params[obj] = layer.quant_params(obj) if spec.enabled else None
    w = layer.weight.data.astype(np.float64)
    b = layer.bias.data.astype(np.float64)
    pw, pb = params[QuantObject.WEIGHTS], params[QuantObject.BIASES]
    packed = PackedLinear(
        layer=layer_id or layer.name, fan_in=layer.fan_in, fan_out=layer.fan_out, params=params,
        weight_int=quantize(w, pw) if pw else None, bias_int=quantize(b, pb) if pb else None,
        weight_float=None if pw else w.copy(), bias_float=None if pb else b.copy())
    if packed.integer_only and packed.accumulator_bound() >= ACC_LIMIT:
        raise AccumulatorOverflow(f"{packed.layer}: accumulator bound exceeds 64-bit headroom")
    return packed


def freeze(model: TransformerForecaster) -> PackedModel:
    if model.qconfig is not None:
        for lid, layer in model.layers.items():
            for obj in QuantObject:
                if layer.spec[obj].enabled:
                    layer.resolved_scheme(obj)
    layers = {lid: freeze_layer(layer, lid) for lid, layer in model.layers.items()}
    floats = {"pe": model.pe.astype(np.float64),
              "ln1.gain": model.ln1_gain.data.astype(np.float64),
              "ln1.bias": model.ln1_bias.data.astype(np.float64),
              "ln2.gain": model.ln2_gain.data.astype(np.float64),
              "ln2.bias": model.ln2_bias.data.astype(np.float64)}
    qc = model.resolved_configuration() if model.qconfig is not None else None
    return PackedModel(config=model.config, qconfig=qc, layers=layers, floats=floats,
                       digest=config_digest(model.config, model.qconfig))


def int_linear(I_int: np.ndarray, layer: PackedLinear) -> np.ndarray:
    """Integer linear map; input and output live on their objects' integer grids."""
    if not layer.integer_only:
        raise QuantError(f"{layer.layer}: integer path needs all four objects quantised")
    pi, pw = layer.params[QuantObject.INPUTS], layer.params[QuantObject.WEIGHTS]
    pb, po = layer.params[QuantObject.BIASES], layer.params[QuantObject.OUTPUTS]
    I_int = np.asarray(I_int)
    if I_int.size and (I_int.min() < pi.qmin or I_int.max() > pi.qmax):
        raise QuantError(f"{layer.layer}: input integers outside [{pi.qmin}, {pi.qmax}]")
    if layer.accumulator_bound() >= ACC_LIMIT:
        raise AccumulatorOverflow(f"{layer.layer}: accumulator would overflow")
    acc = np.matmul(I_int.astype(np.int64) - pi.zero_point, layer.weight_shifted.astype(np.int64))
    out = (acc * (pi.scale * pw.scale / po.scale)
           + layer.bias_shifted.astype(np.int64) * (pb.scale / po.scale) + po.zero_point)
    return np.clip(np.rint(out), po.qmin, po.qmax).astype(np.int64)


def _hybrid_linear(x: np.ndarray, layer: PackedLinear) -> np.ndarray:
    """Float emulation for layers that keep some objects unquantised."""
    pi, po = layer.params[QuantObject.INPUTS], layer.params[QuantObject.OUTPUTS]
    if pi is not None:
        x, _ = fake_quantize_array(x, pi)
    w = layer.weight_values().astype(x.dtype)
    b = layer.bias_values().astype(x.dtype)
    y = np.matmul(x, w) + b
    if po is not None:
        y, _ = fake_quantize_array(y, po)
    return y


def run_linear(x: np.ndarray, layer: PackedLinear) -> np.ndarray:
    if layer.integer_only:
        pi, po = layer.params[QuantObject.INPUTS], layer.params[QuantObject.OUTPUTS]
        return dequantize(int_linear(quantize(x, pi), layer), po).astype(x.dtype)
    return _hybrid_linear(x, layer)


def int_forward(packed: PackedModel, X, dtype=np.float64) -> np.ndarray:
    """Predictions (normalised units) for windows ``X`` of shape (n, m) or (batch, n, m)."""
    X = np.asarray(X, dtype=dtype)
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input")
    single = X.ndim == 2
    if single:
        X = X[None]
    cfg = packed.config
    if X.shape[1:] != (cfg.n, cfg.m):
        raise ad.ShapeError(f"expected windows of shape ({cfg.n}, {cfg.m}), got {X.shape[1:]}")
    f = {k: Tensor(v.astype(dtype)) for k, v in packed.floats.items()}

    def lin(lid, h: Tensor) -> Tensor:
        return Tensor(run_linear(h.data, packed.layers[lid]))

    emb = ad.add_const(lin("L1", Tensor(X)), f["pe"].data)
    attn = attention(lin("L2", emb), lin("L3", emb), lin("L4", emb), cfg.num_heads)
    h = ad.layer_norm(ad.add(emb, lin("L5", attn)), f["ln1.gain"], f["ln1.bias"])
    ffn = lin("L7", ad.relu(lin("L6", h)))
    h = ad.layer_norm(ad.add(h, ffn), f["ln2.gain"], f["ln2.bias"])
    y = lin("L8", ad.mean_pool_rows(h)).data.reshape(-1)
    return y[0] if single else y


@dataclass
class Consistency:
    max_abs: float
    rmse: float


def consistency_check(model: TransformerForecaster, packed: PackedModel, inputs,
                      batch_size: int = 512) -> Consistency:
    """Deviation between the fake-quant model and the integer path over ``inputs``."""
    if config_digest(model.config, model.qconfig) != packed.digest:
        raise ProvenanceError("packed model was not frozen from this model's configuration")
    X = np.asarray(inputs, dtype=model.dtype)
    fake = model.predict(X, batch_size=batch_size)
    real = np.concatenate([int_forward(packed, X[i:i + batch_size], dtype=model.dtype)
                           for i in range(0, len(X), batch_size)])
    dev = np.abs(fake.astype(np.float64) - real.astype(np.float64))
    return Consistency(max_abs=float(dev.max()), rmse=float(np.sqrt(np.mean(dev ** 2))))

