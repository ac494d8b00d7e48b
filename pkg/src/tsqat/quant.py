"""Affine quantisation: scale/zero-point computation, (de)quantisation,
fake quantisation with a clipping-aware straight-through gradient, range
tracking and adaptive scheme selection.

Rounding is round-half-to-even (``np.rint``) everywhere, and clipping is
applied before rounding.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, masked_identity

SUPPORTED_BITS = (2, 4, 8, 16)


class QuantError(ValueError):
    pass


class InvalidRangeError(QuantError):
    pass


class DegenerateRangeError(QuantError):
    pass


class InvalidInputError(QuantError):
    pass


class SchemePolicy(str, enum.Enum):
    SQ = "SQ"
    AQ = "AQ"
    ADAPTIVE = "APQ"

    @classmethod
    def parse(cls, text: str) -> "SchemePolicy":
        key = text.strip().upper()
        if key in ("ADAPTIVE", "APQ"):
            return cls.ADAPTIVE
        return cls(key)


class Scheme(str, enum.Enum):
    """A resolved scheme: what parameters are actually computed with."""

    SQ = "SQ"
    AQ = "AQ"


@dataclass(frozen=True)
class FloatRange:
    beta: float
    alpha: float

    def __post_init__(self):
        if not (math.isfinite(self.beta) and math.isfinite(self.alpha)):
            raise InvalidRangeError(f"non-finite range [{self.beta}, {self.alpha}]")
        if self.beta > self.alpha:
            raise InvalidRangeError(f"lower bound {self.beta} exceeds upper bound {self.alpha}")


def check_bits(bits: int) -> int:
    if bits not in SUPPORTED_BITS:
        raise QuantError(f"unsupported bit width {bits}; choose from {SUPPORTED_BITS}")
    return int(bits)


def int_range(bits: int, scheme: Scheme) -> tuple[int, int]:
    hi = 2 ** (bits - 1) - 1
    lo = -(2 ** (bits - 1)) if scheme is Scheme.AQ else -hi
    return lo, hi


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int
    scheme: Scheme

    def __post_init__(self):
        check_bits(self.bits)
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise QuantError(f"scale must be positive and finite, got {self.scale}")
        if self.scheme is Scheme.SQ and self.zero_point != 0:
            raise QuantError("symmetric params must have zero point 0")
        lo, hi = int_range(self.bits, Scheme.AQ)
        if not lo <= self.zero_point <= hi:
            raise QuantError(f"zero point {self.zero_point} outside [{lo}, {hi}]")

    @property
    def qmin(self) -> int:
        return int_range(self.bits, self.scheme)[0]

    @property
    def qmax(self) -> int:
        return int_range(self.bits, self.scheme)[1]

    @property
    def levels(self) -> int:
        return self.qmax - self.qmin + 1

    def grid_bounds(self) -> tuple[float, float]:
        """Float values of the smallest and largest representable integers."""
        return (self.scale * (self.qmin - self.zero_point),
                self.scale * (self.qmax - self.zero_point))


def aq_params(rng: FloatRange, bits: int) -> QuantParams:
    bits = check_bits(bits)
    beta, alpha = float(rng.beta), float(rng.alpha)
    if alpha == beta:
        eps = max(abs(alpha), 1.0) * 1e-8
        warnings.warn(f"degenerate range [{beta}, {alpha}] widened by {eps:g}", RuntimeWarning,
                      stacklevel=2)
        beta, alpha = beta - eps, alpha + eps
    steps = 2 ** bits - 1
    s = (alpha - beta) / steps
    # alpha / s written as alpha * steps / (alpha - beta) so ties stay exact
    lo, hi = int_range(bits, Scheme.AQ)
    z = np.rint(np.clip(hi - alpha * steps / (alpha - beta), lo, hi))
    return QuantParams(scale=s, zero_point=int(z), bits=bits, scheme=Scheme.AQ)


def sq_params(rng: FloatRange, bits: int) -> QuantParams:
    bits = check_bits(bits)
    peak = max(abs(rng.alpha), abs(rng.beta))
    if peak == 0:
        raise DegenerateRangeError("symmetric scale undefined for the range [0, 0]")
    return QuantParams(scale=2.0 * peak / (2 ** bits - 2), zero_point=0, bits=bits, scheme=Scheme.SQ)


def params_for(rng: FloatRange, bits: int, scheme: Scheme) -> QuantParams:
    return aq_params(rng, bits) if Scheme(scheme) is Scheme.AQ else sq_params(rng, bits)


def quantize(r, p: QuantParams):
    """Map floats to integers of ``p``'s grid. Scalars in, int out; arrays in, int64 array out."""
    arr = np.asarray(r, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("cannot quantise non-finite values")
    q = np.rint(np.clip(arr / p.scale + p.zero_point, p.qmin, p.qmax)).astype(np.int64)
    return int(q) if q.ndim == 0 else q


def dequantize(q, p: QuantParams):
    arr = np.asarray(q)
    if arr.size and (arr.min() < p.qmin or arr.max() > p.qmax):
        raise QuantError(f"integer outside [{p.qmin}, {p.qmax}]")
    out = p.scale * (arr.astype(np.float64) - p.zero_point)
    return float(out) if out.ndim == 0 else out


def fake_quantize_array(x: np.ndarray, p: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    """Quantise-then-dequantise; also returns the in-grid mask used by the STE."""
    if not math.isfinite(float(np.sum(x))) and not np.all(np.isfinite(x)):
        raise InvalidInputError("cannot quantise non-finite values")
    t = np.divide(x, p.scale, dtype=np.float64)
    t += p.zero_point
    mask = (t >= p.qmin) & (t <= p.qmax)
    np.clip(t, p.qmin, p.qmax, out=t)
    np.rint(t, out=t)
    t -= p.zero_point
    t *= p.scale
    return t.astype(x.dtype, copy=False), mask


def fake_quantize(t, p: QuantParams):
    """Fake-quantise an array or :class:`Tensor`.

    For tensors, the backward pass forwards the incoming gradient where the
    pre-clip value lies on the grid and zeroes it elsewhere.
    """
    if isinstance(t, Tensor):
        value, mask = fake_quantize_array(t.data, p)
        return masked_identity(t, value, mask, op="fake_quant")
    value, _ = fake_quantize_array(np.asarray(t, dtype=np.float64), p)
    return value


def apq_select(rng: FloatRange, threshold: float) -> Scheme:
    """Symmetric grid iff the range straddles zero and is nearly balanced."""
    if threshold < 0:
        raise QuantError("threshold must be non-negative")
    beta, alpha = rng.beta, rng.alpha
    if not (beta < 0 < alpha):
        return Scheme.AQ
    ratio = abs((beta + alpha) / max(abs(beta), abs(alpha)))
    return Scheme.SQ if ratio < threshold else Scheme.AQ


class RangeTracker:
    """Running [beta, alpha] estimate for one quantisation object.

    ``mode="minmax"`` replaces the bounds with each batch's extremes;
    ``mode="ema"`` blends them with ``momentum`` after the first observation.
    """

    def __init__(self, mode: str = "ema", momentum: float = 0.99):
        if mode not in ("minmax", "ema"):
            raise ValueError(f"unknown tracker mode {mode!r}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("EMA momentum must lie in [0, 1)")
        self.mode = mode
        self.momentum = momentum
        self.beta = 0.0
        self.alpha = 0.0
        self.initialized = False

    def __repr__(self):
        return f"RangeTracker({self.mode}, beta={self.beta:.6g}, alpha={self.alpha:.6g})"

    @property
    def range(self) -> FloatRange:
        if not self.initialized:
            raise QuantError("range tracker has not observed any data")
        return FloatRange(self.beta, self.alpha)

    def update(self, t) -> "RangeTracker":
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        if arr.size == 0:
            raise InvalidInputError("cannot track the range of an empty tensor")
        lo, hi = float(arr.min()), float(arr.max())
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise InvalidInputError("non-finite values in tracked tensor")
        if self.mode == "ema" and self.initialized:
            m = self.momentum
            self.beta = m * self.beta + (1 - m) * lo
            self.alpha = m * self.alpha + (1 - m) * hi
        else:
            self.beta, self.alpha = lo, hi
        self.initialized = True
        return self

    def state(self) -> dict:
        return {"mode": self.mode, "momentum": self.momentum, "beta": self.beta,
                "alpha": self.alpha, "initialized": self.initialized}

    @classmethod
    def from_state(cls, state: dict) -> "RangeTracker":
        tr = cls(state["mode"], state["momentum"])
        tr.beta, tr.alpha = float(state["beta"]), float(state["alpha"])
        tr.initialized = bool(state["initialized"])
        return tr


def update_range(tracker: RangeTracker, t) -> RangeTracker:
    return tracker.update(t)
