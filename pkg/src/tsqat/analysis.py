"""Static cost analysis of quantisation configurations.

Zero-point overhead counts one integer subtraction per feature-vector
element whose object uses the asymmetric scheme; parameter shifts are
precomputed and cost nothing at inference. Model size counts parameter
payload only: bit-packed linear tensors plus 32-bit float non-linear ones.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

from .model import (LAYER_IDS, ModelConfig, QuantConfiguration, QuantObject, SchemePolicy,
                    count_params)
from .quant import QuantError, Scheme

FLOAT_BYTES = 4
KB = 1024


@dataclass(frozen=True)
class LayerShape:
    layer: str
    inputs: int
    outputs: int


def layer_shapes(config: ModelConfig) -> list[LayerShape]:
    """Feature-vector element counts per linear layer for one window."""
    n = config.n
    shapes = []
    for lid, (fan_in, fan_out) in config.layer_dims().items():
        rows = 1 if lid == "L8" else n
        shapes.append(LayerShape(lid, rows * fan_in, rows * fan_out))
    return shapes


def _resolved(scheme) -> Scheme | None:
    if scheme is None:
        return None
    if isinstance(scheme, SchemePolicy):
        if scheme is SchemePolicy.ADAPTIVE:
            raise QuantError("overhead needs resolved schemes; adaptive objects are unresolved")
        return Scheme(scheme.value)
    return Scheme(scheme)


def layer_overhead(shape: LayerShape, input_scheme, output_scheme) -> tuple[int, int]:
    """Zero-point subtractions for one layer; ``None`` means the object is not quantised."""
    i, o = _resolved(input_scheme), _resolved(output_scheme)
    return (shape.inputs if i is Scheme.AQ else 0, shape.outputs if o is Scheme.AQ else 0)


@dataclass
class OverheadReport:
    per_layer: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(a + b for a, b in self.per_layer.values())

    def to_table(self) -> str:
        lines = [f"{'layer':<6}{'inputs':>10}{'outputs':>10}{'total':>10}"]
        for lid, (a, b) in self.per_layer.items():
            lines.append(f"{lid:<6}{a:>10}{b:>10}{a + b:>10}")
        lines.append(f"{'all':<6}{'':>10}{'':>10}{self.total:>10}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "input_ops", "output_ops", "total_ops"])
        for lid, (a, b) in self.per_layer.items():
            w.writerow([lid, a, b, a + b])
        w.writerow(["total", "", "", self.total])
        return buf.getvalue()


def _object_scheme(qconfig: QuantConfiguration, lid: str, obj: QuantObject):
    spec = qconfig[lid][obj]
    return spec.policy if spec.enabled else None


def total_overhead(config: ModelConfig, qconfig: QuantConfiguration) -> OverheadReport:
    report = OverheadReport()
    for shape in layer_shapes(config):
        report.per_layer[shape.layer] = layer_overhead(
            shape, _object_scheme(qconfig, shape.layer, QuantObject.INPUTS),
            _object_scheme(qconfig, shape.layer, QuantObject.OUTPUTS))
    return report


def _tensor_bytes(count: int, bits: int | None) -> int:
    if bits is None:
        return count * FLOAT_BYTES
    return math.ceil(count * bits / 8)


@dataclass
class SizeReport:
    float_bytes: int
    packed_bytes: int
    per_layer_bytes: dict[str, int] = field(default_factory=dict)

    @property
    def float_kb(self) -> float:
        return self.float_bytes / KB

    @property
    def packed_kb(self) -> float:
        return self.packed_bytes / KB

    @property
    def ratio(self) -> float:
        return self.float_bytes / self.packed_bytes

    def to_table(self) -> str:
        lines = [f"{'layer':<8}{'bytes':>10}"]
        lines += [f"{k:<8}{v:>10}" for k, v in self.per_layer_bytes.items()]
        lines.append(f"float model : {self.float_bytes} B = {self.float_kb:.2f} KB")
        lines.append(f"packed model: {self.packed_bytes} B = {self.packed_kb:.2f} KB")
        lines.append(f"compression : {self.ratio:.3f}x")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["item", "bytes"])
        for k, v in self.per_layer_bytes.items():
            w.writerow([k, v])
        w.writerow(["float_total", self.float_bytes])
        w.writerow(["packed_total", self.packed_bytes])
        w.writerow(["ratio", f"{self.ratio:.6f}"])
        return buf.getvalue()


def model_size(config: ModelConfig, qconfig: QuantConfiguration | None = None) -> SizeReport:
    counts = count_params(config)
    per_layer = {}
    for lid, (fan_in, fan_out) in config.layer_dims().items():
        wbits = bbits = None
        if qconfig is not None:
            w, b = qconfig[lid][QuantObject.WEIGHTS], qconfig[lid][QuantObject.BIASES]
            wbits = w.bits if w.enabled else None
            bbits = b.bits if b.enabled else None
        per_layer[lid] = _tensor_bytes(fan_in * fan_out, wbits) + _tensor_bytes(fan_out, bbits)
    per_layer["LN"] = (counts.total - counts.linear) * FLOAT_BYTES
    return SizeReport(float_bytes=counts.total * FLOAT_BYTES, packed_bytes=sum(per_layer.values()),
                      per_layer_bytes=per_layer)


@dataclass
class AblationResult:
    layer: str
    bits: int
    rmse: float
    baseline_rmse: float

    @property
    def delta(self) -> float:
        return self.rmse - self.baseline_rmse


def ablate_layer_bits(base: QuantConfiguration, victim: str, victim_bits: int,
                      driver: Callable[[QuantConfiguration], float],
                      baseline_rmse: float | None = None) -> AblationResult:
    """Re-train with one layer at ``victim_bits``; ``driver`` trains+evaluates and returns RMSE."""
    if victim not in LAYER_IDS:
        raise ValueError(f"unknown layer {victim!r}")
    if baseline_rmse is None:
        baseline_rmse = driver(base)
    return AblationResult(victim, victim_bits, driver(base.with_layer_bits(victim, victim_bits)),
                          baseline_rmse)


def ablation_sweep(base: QuantConfiguration, victim_bits: int,
                   driver: Callable[[QuantConfiguration], float]) -> list[AblationResult]:
    baseline = driver(base)
    return [ablate_layer_bits(base, lid, victim_bits, driver, baseline) for lid in LAYER_IDS]


def most_sensitive(results: list[AblationResult]) -> str:
    return max(results, key=lambda r: r.delta).layer
