import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mindreading.ulq import (InvalidInputError, InvalidRangeError, LogCode, LogTensor, QuantSpec, clip, dequantize,
                             log2_round, quantize, quantize_relu, quantize_sigmoid, quantize_tanh, quantize_tensor,
                             quantize_weight, round_nearest)
from oracles import round_log2

TANH = QuantSpec.tanh(4, 0)
SIG = QuantSpec.sigmoid(4, 1)
RELU = QuantSpec.relu(4, 0)
WGT = QuantSpec.weight(4, 0)


@pytest.mark.parametrize("a, want", [(-5, -4), (-2, -2), (3, 0)])
def test_clip(a, want):
    assert clip(a, -4, 0) == want


def test_clip_empty_range():
    with pytest.raises(InvalidRangeError):
        clip(0, 1, -1)


@pytest.mark.parametrize("a, want", [(-1.4, -1), (-1.5, -2), (0.49, 0), (1.5, 2), (2.5, 3), (-0.5, -1), (0.5, 1)])
def test_round_nearest(a, want):
    assert round_nearest(a) == want


def test_round_nearest_rejects_nan():
    with pytest.raises(InvalidInputError):
        round_nearest(float("nan"))


@pytest.mark.parametrize("x, want", [
    (0.0, LogCode.zero()),
    (-0.5, LogCode.of(-1, -1)),
    (0.07, LogCode.of(1, -4)),
    (0.9, LogCode.of(1, 0)),
])
def test_tanh_examples(x, want):
    assert quantize_tanh(x, TANH) == want


@pytest.mark.parametrize("x, exp", [(0.5, -1), (0.01, -3), (0.99, 0)])
def test_sigmoid_examples(x, exp):
    assert quantize_sigmoid(x, SIG) == LogCode.of(1, exp)


@pytest.mark.parametrize("x, want", [(0.0, LogCode.zero()), (5.7, LogCode.of(1, 3)), (0.3, LogCode.of(1, 0))])
def test_relu_examples(x, want):
    assert quantize_relu(x, RELU) == want


@pytest.mark.parametrize("w, want", [(0.22, LogCode.of(1, -2)), (-1.0, LogCode.of(-1, 0)), (0.001, LogCode.of(1, -4))])
def test_weight_examples(w, want):
    assert quantize_weight(w, WGT) == want


@pytest.mark.parametrize("c, v", [(LogCode.zero(), 0.0), (LogCode.of(1, -3), 0.125), (LogCode.of(-1, 2), -4.0)])
def test_dequantize(c, v):
    assert dequantize(c) == v


def test_windows():
    assert QuantSpec.tanh(4, 1).window == (-3, 1)
    assert QuantSpec.sigmoid(3).window == (-2, 1)
    assert QuantSpec.relu(4, -2).window == (-2, 2)
    assert QuantSpec.weight(5).window == (-5, 0)


@pytest.mark.parametrize("fn, spec", [(quantize_sigmoid, SIG), (quantize_relu, RELU)])
def test_unsigned_rejects_negative(fn, spec):
    with pytest.raises(InvalidInputError):
        fn(-0.1, spec)


@pytest.mark.parametrize("bad", [math.inf, -math.inf, math.nan])
def test_non_finite_rejected(bad):
    with pytest.raises(InvalidInputError):
        quantize_tanh(bad, TANH)


def test_kind_mismatch():
    with pytest.raises(ValueError):
        quantize_tanh(0.5, SIG)


def test_zero_normalization():
    assert LogCode(True, -1, 5) == LogCode.zero()


def test_log2_round_matches_rational_oracle():
    rng = np.random.default_rng(3)
    xs = np.exp2(rng.uniform(-40, 40, 20000))
    for x in xs:
        assert log2_round(float(x)) == round_log2(Fraction(float(x)))


def test_log2_round_near_half_points():
    # doubles adjacent to 2**(k + 1/2) on both sides
    for k in range(-20, 20):
        t = 2.0 ** (k + 0.5)
        for x in (t, math.nextafter(t, 0), math.nextafter(t, math.inf)):
            assert log2_round(x) == round_log2(Fraction(x))


def test_quantize_tensor_examples():
    t = quantize_tensor([0, -0.5, 0.07], TANH)
    assert t.codes == [LogCode.zero(), LogCode.of(-1, -1), LogCode.of(1, -4)]
    assert quantize_tensor(np.zeros((0,)), TANH).shape == (0,)
    z = quantize_tensor(np.zeros((2, 3)), TANH)
    assert z.shape == (2, 3) and z.is_zero.all()


def test_quantize_tensor_matches_scalar():
    rng = np.random.default_rng(0)
    v = rng.normal(0, 1, (7, 9))
    t = quantize_tensor(v, WGT)
    assert t.codes == [quantize_weight(x, WGT) for x in v.ravel()]


def test_quantize_tensor_error_names_index():
    v = np.array([[0.1, 0.2], [0.3, -0.4]])
    with pytest.raises(InvalidInputError, match=r"element \(1, 1\)"):
        quantize_tensor(v, SIG)


def test_logtensor_values_and_reshape():
    t = quantize_tensor([[0.25, -2.0], [0.0, 1.0]], QuantSpec.tanh(4, 2))
    assert np.array_equal(t.values(), [[0.25, -2.0], [0.0, 1.0]])
    assert t.reshape(-1).shape == (4,)


specs = st.builds(QuantSpec, st.integers(1, 6), st.sampled_from(["tanh", "sigmoid", "relu", "weight"]),
                  st.integers(-3, 3))
reals = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def _fit(x, spec):
    return abs(x) if spec.kind.value in ("sigmoid", "relu") else x


@settings(max_examples=500, deadline=None)
@given(reals, specs)
def test_representable_and_idempotent(x, spec):
    c = quantize(_fit(x, spec), spec)
    if not c.is_zero:
        lo, hi = spec.window
        assert lo <= c.exponent <= hi
    assert quantize(dequantize(c), spec) == c


@settings(max_examples=500, deadline=None)
@given(st.floats(-0.999, 0.999, allow_nan=False), st.floats(-0.999, 0.999, allow_nan=False))
def test_tanh_monotone(a, b):
    a, b = sorted((a, b))
    assert dequantize(quantize_tanh(a, TANH)) <= dequantize(quantize_tanh(b, TANH))


@settings(max_examples=500, deadline=None)
@given(st.floats(0, 1e4, allow_nan=False), st.floats(0, 1e4, allow_nan=False))
def test_relu_sigmoid_monotone(a, b):
    a, b = sorted((a, b))
    assert dequantize(quantize_relu(a, RELU)) <= dequantize(quantize_relu(b, RELU))
    assert dequantize(quantize_sigmoid(a, SIG)) <= dequantize(quantize_sigmoid(b, SIG))


@settings(max_examples=500, deadline=None)
@given(st.floats(-1, 1, allow_nan=False).filter(lambda v: v != 0))
def test_tanh_symmetry_and_sign(x):
    assert quantize_tanh(-x, TANH) == -quantize_tanh(x, TANH)
    assert math.copysign(1, dequantize(quantize_tanh(x, TANH))) == math.copysign(1, x)


@settings(max_examples=500, deadline=None)
@given(st.floats(1e-300, 1e300), specs)
def test_error_bound_when_unclipped(x, spec):
    lo, hi = spec.window
    c = quantize(x, spec)
    if lo < c.exponent < hi:
        assert abs(math.log2(x) - c.exponent) <= 0.5
