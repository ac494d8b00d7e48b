"""Run configuration stored as an INI file.

Sections: ``[model]``, ``[training]``, ``[quantisation]`` and optional
per-layer overrides such as::

    [quantisation.L8]
    bits = 8
    outputs = 8:AQ
    inputs = off
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import LAYER_IDS, ModelConfig, QuantConfiguration, QuantObject, make_preset
from .quant import SchemePolicy
from .training import TrainConfig


@dataclass
class QuantSettings:
    preset: str = "float"
    bits: int = 8
    apq_threshold: float = 0.1
    ema_momentum: float = 0.99
    cover_batch: bool = True
    layer_bits: dict[str, int] = field(default_factory=dict)
    object_overrides: dict[str, dict[str, str]] = field(default_factory=dict)

    def build(self) -> QuantConfiguration | None:
        if self.preset == "float" and not self.object_overrides:
            return None
        qc = make_preset(self.preset, self.bits, self.apq_threshold, self.layer_bits or None)
        for lid, objs in self.object_overrides.items():
            spec = qc.layers[lid]
            for name, value in objs.items():
                spec = spec.with_object(name, **parse_object_override(value))
            qc.layers[lid] = spec
            qc.preset = "custom"
        return qc


def parse_object_override(text: str) -> dict:
    text = text.strip()
    if text.lower() in ("off", "float", "none"):
        return {"enabled": False}
    bits, _, policy = text.partition(":")
    out: dict = {"enabled": True, "bits": int(bits)}
    if policy:
        out["policy"] = SchemePolicy.parse(policy)
    return out


@dataclass
class DataSettings:
    path: str = ""
    n: int = 24
    test_start: str = ""
    test_end: str = ""


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    quant: QuantSettings = field(default_factory=QuantSettings)
    data: DataSettings = field(default_factory=DataSettings)
    dtype: str = "float64"

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["model"] = {k: str(v) for k, v in asdict(self.model).items()}
        # the APQ threshold lives under [quantisation] only
        cp["training"] = {k: str(v) for k, v in asdict(self.training).items() if k != "apq_threshold"}
        cp["training"]["dtype"] = self.dtype
        q = self.quant
        cp["quantisation"] = {"preset": q.preset, "bits": str(q.bits),
                              "apq_threshold": str(q.apq_threshold),
                              "ema_momentum": str(q.ema_momentum),
                              "cover_batch": str(q.cover_batch)}
        for lid in LAYER_IDS:
            sec = {}
            if lid in q.layer_bits:
                sec["bits"] = str(q.layer_bits[lid])
            sec.update(q.object_overrides.get(lid, {}))
            if sec:
                cp[f"quantisation.{lid}"] = sec
        cp["data"] = {k: str(v) for k, v in asdict(self.data).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        cfg = cls()
        if cp.has_section("model"):
            cfg.model = ModelConfig(**_typed(ModelConfig, cp["model"]))
        if cp.has_section("training"):
            sec = dict(cp["training"])
            if "apq_threshold" in sec:
                raise ValueError("[training]: set apq_threshold under [quantisation]")
            cfg.dtype = sec.pop("dtype", cfg.dtype)
            cfg.training = TrainConfig(**_typed(TrainConfig, sec))
        if cp.has_section("quantisation"):
            sec = cp["quantisation"]
            cfg.quant = QuantSettings(
                preset=sec.get("preset", "float").lower(), bits=sec.getint("bits", 8),
                apq_threshold=sec.getfloat("apq_threshold", 0.1),
                ema_momentum=sec.getfloat("ema_momentum", 0.99),
                cover_batch=sec.getboolean("cover_batch", True))
        cfg.training.apq_threshold = cfg.quant.apq_threshold
        for lid in LAYER_IDS:
            name = f"quantisation.{lid}"
            if not cp.has_section(name):
                continue
            sec = dict(cp[name])
            if "bits" in sec:
                cfg.quant.layer_bits[lid] = int(sec.pop("bits"))
            unknown = set(sec) - {o.value for o in QuantObject}
            if unknown:
                raise ValueError(f"[{name}]: unknown keys {sorted(unknown)}")
            if sec:
                cfg.quant.object_overrides[lid] = sec
        if cp.has_section("data"):
            cfg.data = DataSettings(**_typed(DataSettings, cp["data"]))
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_ini(Path(path).read_text())


def _typed(dc, section) -> dict:
    types = {f.name: f.type for f in fields(dc)}
    out = {}
    for k, v in dict(section).items():
        if k not in types:
            raise ValueError(f"unknown key {k!r} for {dc.__name__}")
        t = types[k] if isinstance(types[k], str) else types[k].__name__
        if t == "int":
            out[k] = int(v)
        elif t == "float":
            out[k] = float(v)
        elif t == "bool":
            out[k] = v.strip().lower() in ("1", "true", "yes", "on")
        else:
            out[k] = v
    return out
