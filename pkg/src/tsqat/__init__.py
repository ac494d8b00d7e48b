"""Quantisation-aware training toolkit for a small time-series Transformer."""

from .model import ModelConfig, TransformerForecaster, apply_preset, count_params, make_preset
from .quant import FloatRange, QuantParams, Scheme, SchemePolicy
from .training import TrainConfig, train_qat

__version__ = "0.1.0"
