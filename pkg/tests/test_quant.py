from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsqat.autodiff import Tensor, tensor_sum
from tsqat.quant import (DegenerateRangeError, FloatRange, InvalidInputError, InvalidRangeError,
                         QuantError, QuantParams, RangeTracker, Scheme, apq_select, aq_params,
                         dequantize, fake_quantize, int_range, quantize, sq_params, update_range)


def exact_aq(beta, alpha, bits):
    """Scale and zero point in rational arithmetic, round-half-even as Python's round()."""
    beta, alpha = Fraction(beta), Fraction(alpha)
    s = (alpha - beta) / (2 ** bits - 1)
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    z = min(max(hi - alpha / s, lo), hi)
    return s, round(z)


@pytest.mark.parametrize("beta,alpha,bits", [(0.0, 1.0, 8), (-1.0, 1.0, 8), (-1.0, 1.0, 2)])
def test_aq_params_against_rational_oracle(beta, alpha, bits):
    s, z = exact_aq(beta, alpha, bits)
    p = aq_params(FloatRange(beta, alpha), bits)
    assert p.scheme is Scheme.AQ
    assert p.scale == pytest.approx(float(s), rel=1e-15)
    assert p.zero_point == z


def test_aq_params_examples():
    p = aq_params(FloatRange(0.0, 1.0), 8)
    assert p.scale == pytest.approx(0.0039216, abs=1e-7)
    assert p.zero_point == -128
    # 127 - 127.5 rounds half to even
    assert aq_params(FloatRange(-1.0, 1.0), 8).zero_point == 0
    p2 = aq_params(FloatRange(-1.0, 1.0), 2)
    assert p2.scale == pytest.approx(2 / 3) and p2.zero_point == 0


def test_aq_params_degenerate_widens_with_warning():
    with pytest.warns(RuntimeWarning):
        p = aq_params(FloatRange(0.5, 0.5), 8)
    assert p.scale > 0


def test_invalid_ranges():
    with pytest.raises(InvalidRangeError):
        FloatRange(float("nan"), 1.0)
    with pytest.raises(InvalidRangeError):
        FloatRange(1.0, 0.0)
    with pytest.raises(DegenerateRangeError):
        sq_params(FloatRange(0.0, 0.0), 8)
    with pytest.raises(QuantError):
        sq_params(FloatRange(-1, 1), 3)


@pytest.mark.parametrize("beta,alpha,bits,expected", [
    (-1.0, 1.0, 8, Fraction(2, 254)),
    (-1.0, 1.0, 4, Fraction(2, 14)),
    (-0.5, 1.0, 8, Fraction(2, 254)),
])
def test_sq_params(beta, alpha, bits, expected):
    p = sq_params(FloatRange(beta, alpha), bits)
    assert p.zero_point == 0 and p.scheme is Scheme.SQ
    assert p.scale == pytest.approx(float(expected), rel=1e-15)


def test_quantize_examples():
    sq = QuantParams(1 / 127, 0, 8, Scheme.SQ)
    assert quantize(1.0, sq) == 127
    assert quantize(0.0, sq) == 0
    aq = QuantParams(1 / 255, -128, 8, Scheme.AQ)
    assert quantize(2.0, aq) == 127
    with pytest.raises(InvalidInputError):
        quantize(float("inf"), sq)


def test_dequantize_examples():
    sq = QuantParams(1 / 127, 0, 8, Scheme.SQ)
    assert dequantize(0, sq) == 0.0
    assert dequantize(127, sq) == pytest.approx(1.0)
    aq = QuantParams(1 / 255, -128, 8, Scheme.AQ)
    assert dequantize(-128, aq) == 0.0
    with pytest.raises(QuantError):
        dequantize(-128, sq)


def test_fake_quantize_examples():
    sq = QuantParams(1 / 127, 0, 8, Scheme.SQ)
    assert fake_quantize(np.array([0.0]), sq)[0] == 0.0
    assert fake_quantize(np.array([0.3]), sq)[0] == pytest.approx(38 / 127)
    assert abs(fake_quantize(np.array([0.3]), sq)[0] - 0.3) <= sq.scale / 2


def test_fake_quantize_gradient_masks_clipped_elements():
    p = QuantParams(1 / 127, 0, 8, Scheme.SQ)
    x = Tensor(np.array([-2.0, -0.5, 0.0, 0.999, 1.0, 1.5]), requires_grad=True)
    tensor_sum(fake_quantize(x, p)).backward()
    np.testing.assert_array_equal(x.grad, [0, 1, 1, 1, 1, 0])


def test_apq_select_examples():
    assert apq_select(FloatRange(-1.0, 1.0), 0.1) is Scheme.SQ
    assert apq_select(FloatRange(-0.95, 1.0), 0.1) is Scheme.SQ
    assert apq_select(FloatRange(0.0, 1.0), 0.1) is Scheme.AQ
    assert apq_select(FloatRange(0.0, 0.0), 0.1) is Scheme.AQ
    assert apq_select(FloatRange(-1.0, 0.5), 0.1) is Scheme.AQ


def test_range_tracker_examples():
    tr = update_range(RangeTracker("minmax"), np.array([-1.0, 2.0]))
    assert (tr.beta, tr.alpha) == (-1.0, 2.0)
    update_range(tr, np.array([0.5]))
    assert (tr.beta, tr.alpha) == (0.5, 0.5)
    ema = RangeTracker("ema", 0.9)
    update_range(ema, np.array([-1.0, 2.0]))
    update_range(ema, np.array([-2.0, 1.0]))
    assert ema.beta == pytest.approx(-1.1) and ema.alpha == pytest.approx(1.9)
    with pytest.raises(InvalidInputError):
        update_range(ema, np.array([]))
    with pytest.raises(ValueError):
        RangeTracker("ema", 1.0)


def test_sq_4bit_has_one_fewer_level():
    sq = sq_params(FloatRange(-1, 1), 4)
    aq = aq_params(FloatRange(-1, 1), 4)
    assert sq.levels == 15 and aq.levels == 16
    assert int_range(4, Scheme.SQ) == (-7, 7)


# --- properties -------------------------------------------------------------

bits_st = st.sampled_from([2, 4, 8, 16])
finite = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)


@st.composite
def range_containing_zero(draw):
    beta = draw(st.floats(-1e3, 0.0, allow_nan=False))
    alpha = draw(st.floats(0.0, 1e3, allow_nan=False))
    if alpha - beta < 1e-6:
        alpha = beta + 1.0
    return FloatRange(beta, alpha)


@settings(max_examples=300, deadline=None)
@given(range_containing_zero(), bits_st, st.sampled_from([Scheme.SQ, Scheme.AQ]),
       st.floats(0, 1))
def test_roundtrip_bound(rng, bits, scheme, u):
    p = aq_params(rng, bits) if scheme is Scheme.AQ else sq_params(rng, bits)
    r = rng.beta + u * (rng.alpha - rng.beta)
    err = abs(dequantize(quantize(r, p), p) - r)
    assert err <= p.scale / 2 * (1 + 1e-9) + 1e-12


@settings(max_examples=200, deadline=None)
@given(range_containing_zero(), bits_st)
def test_aq_zero_point_recovers_zero(rng, bits):
    p = aq_params(rng, bits)
    assert dequantize(p.zero_point, p) == 0.0
    assert abs(dequantize(quantize(0.0, p), p)) <= p.scale / 2


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=50), bits_st, st.floats(1e-6, 10))
def test_range_containment(xs, bits, scale):
    for scheme, z in ((Scheme.SQ, 0), (Scheme.AQ, -(2 ** (bits - 1)) + 1)):
        p = QuantParams(scale, z, bits, scheme)
        q = quantize(np.array(xs), p)
        assert q.min() >= p.qmin and q.max() <= p.qmax
        if scheme is Scheme.SQ:
            assert not np.any(q == -(2 ** (bits - 1)))
            assert quantize(0.0, p) == 0 and dequantize(0, p) == 0.0


@settings(max_examples=200, deadline=None)
@given(finite, finite, st.floats(0, 2), st.floats(0, 2))
def test_apq_threshold_monotone(a, b, t1, t2):
    rng = FloatRange(min(a, b), max(a, b))
    lo, hi = sorted((t1, t2))
    if apq_select(rng, lo) is Scheme.SQ:
        assert apq_select(rng, hi) is Scheme.SQ


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=30), range_containing_zero(), bits_st,
       st.sampled_from([Scheme.SQ, Scheme.AQ]))
def test_fake_quantize_idempotent(xs, rng, bits, scheme):
    p = aq_params(rng, bits) if scheme is Scheme.AQ else sq_params(rng, bits)
    once = fake_quantize(np.array(xs), p)
    np.testing.assert_array_equal(fake_quantize(once, p), once)
