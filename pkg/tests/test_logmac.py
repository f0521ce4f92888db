import math
from fractions import Fraction

import numpy as np
import pytest

from mindreading.eegnet import Activation, LayerKind, LayerSpec, Model, eegnet_spec
from mindreading.logmac import (Accumulator, Engine, FixedTensor, LayerStats, Log2Lut, MacTrace, Mode, QuantConfig,
                                bshift, default_lut, elementwise_mul_log, exp_add4, fixed_mul, infer_quant,
                                layer_forward_quant, log2_unit, log2_unit_array, logq, logq_array, mac_sequence,
                                mac_step, normalize_shift, quantize_model, shift_mac, to_fixed, to_fixed_array)
from mindreading.ulq import InvalidInputError, LogCode, LogTensor, QuantSpec, quantize, quantize_tensor
from helpers import oracle_infer, random_tiny_model
from oracles import code, round_half_away

LSB = 2.0 ** -16
ACC = Accumulator.for_engine()


def fx(v, f=15):
    return round(v * 2 ** f)


# -- Log2 unit -------------------------------------------------------------------------

def test_lut_geometry():
    lut = default_lut()
    assert lut.size_bytes == 8192 and lut.entry_count == 2048 and lut.frac_bits == 16
    assert lut.entries[-1] == 1 << 16
    with pytest.raises(ValueError):
        Log2Lut(entry_count=4096)


def test_lut_entries_within_half_lsb():
    lut = default_lut()
    i = np.arange(1, 2049)
    exact = np.log2(1 + i / 2048) * 65536
    assert np.abs(lut.entries - exact).max() <= 0.5


@pytest.mark.parametrize("m, k, want", [(0.5, 2, -1.0), (1.0, 1, 0.0), (0.375, 2, math.log2(0.375))])
def test_log2_unit_examples(m, k, want):
    raw = fx(m)
    assert normalize_shift(raw, 15) == k
    assert abs(log2_unit(raw, 15) * LSB - want) <= LSB


def test_log2_unit_large_inputs():
    for raw in (3, 1000, (1 << 31) - 1):
        assert abs(log2_unit(raw, 0) * LSB - math.log2(raw)) <= LSB
    with pytest.raises(InvalidInputError):
        log2_unit(0, 15)
    with pytest.raises(InvalidInputError):
        log2_unit(1 << 31, 15)


def test_log2_unit_powers_of_two_exact():
    for f in (0, 10, 15):
        for n in range(31):
            assert log2_unit(1 << n, f) == (n - f) << 16


def test_log2_unit_vector_matches_scalar():
    rng = np.random.default_rng(0)
    raw = np.concatenate([np.arange(1, 5000), rng.integers(1, 1 << 31, 5000)])
    for f in (0, 10, 15):
        assert log2_unit_array(raw, f).tolist() == [log2_unit(int(r), f) for r in raw]


def test_nearest_lookup_is_coarser():
    raw = np.arange(1, 1 << 16)
    exact = np.log2(raw / 2 ** 15)
    near = log2_unit_array(raw, 15, Log2Lut(interpolate=False)) * LSB
    interp = log2_unit_array(raw, 15) * LSB
    assert np.abs(interp - exact).max() <= LSB
    assert np.abs(near - exact).max() > 10 * LSB


# -- logq --------------------------------------------------------------------------------

def test_logq_examples():
    assert logq(fx(-0.5), 15, QuantSpec.tanh()) == LogCode.of(-1, -1)
    assert logq(0, 15, QuantSpec.tanh()) == LogCode.zero()
    with pytest.raises(InvalidInputError):
        logq(-5, 15, QuantSpec.sigmoid())


@pytest.mark.parametrize("spec", [QuantSpec.tanh(4, 0), QuantSpec.tanh(6, 3), QuantSpec.sigmoid(4, 1),
                                  QuantSpec.relu(4, -8), QuantSpec.weight(8, 0)])
def test_logq_exhaustive_against_exact_rounding(spec):
    lo, hi = spec.window
    unsigned = spec.kind.value in ("sigmoid", "relu")
    raw = np.arange(0 if unsigned else -(1 << 15), 1 << 15)
    got = logq_array(raw, 15, spec)
    want = [code(Fraction(int(r), 1 << 15), lo, hi) for r in raw]
    assert list(zip(got.is_zero.tolist(), got.sign.tolist(), got.exponent.tolist())) == want


def test_logq_scalar_matches_formula_path():
    rng = np.random.default_rng(1)
    spec = QuantSpec.tanh(4, 0)
    for r in rng.integers(-(1 << 15), 1 << 15, 3000):
        assert logq(int(r), 15, spec) == quantize(int(r) / 2 ** 15, spec)


def test_logq_with_accumulator_format():
    spec = QuantSpec.relu(4, 0)
    raw = np.arange(0, 1 << 15)
    assert logq_array(raw, 10, spec) == quantize_tensor(raw / 1024, spec)


# -- MAC primitives --------------------------------------------------------------------

def test_exp_add4():
    assert exp_add4(-1, -2) == -3
    assert exp_add4(-4, -4) == -8
    assert exp_add4(0, 0) == 0
    assert exp_add4(5, 6) == 7


def test_bshift_range():
    assert bshift(0) == 1 << 10
    assert bshift(-3) == 1 << 7
    assert bshift(-7) == 1 << 3
    assert bshift(-8) == 0  # saturated adder output underflows
    assert bshift(3) == 1 << 10  # clamps to the top disk


def test_mac_step_examples():
    a = mac_step(ACC, LogCode.of(1, -1), LogCode.of(1, -2))
    assert a.real == 0.125
    assert mac_step(a, LogCode.zero(), LogCode.of(1, 0)) == a
    b = mac_step(a, LogCode.of(-1, 0), LogCode.of(1, -3))
    assert b.real == 0.0 and not b.saturated


def test_mac_underflow_and_saturation():
    assert mac_step(ACC, LogCode.of(1, -4), LogCode.of(1, -4)).value == 0
    acc = Accumulator.for_engine(value=32767 - 512)
    acc = mac_step(acc, LogCode.of(1, 0), LogCode.of(1, 0))
    assert acc.value == 32767 and acc.saturated
    acc = mac_step(acc, LogCode.of(-1, 0), LogCode.of(1, 0))
    assert acc.saturated  # latched


def test_mac_trace_replay():
    rng = np.random.default_rng(4)
    pairs = [(LogCode.of(int(rng.choice([-1, 1])), int(rng.integers(-4, 1))),
              LogCode.of(int(rng.choice([-1, 1])), int(rng.integers(-4, 1)))) for _ in range(50)]
    pairs.append((LogCode.zero(), LogCode.of(1, 0)))
    trace = MacTrace()
    final = mac_sequence(ACC, pairs, trace=trace)
    assert trace.replay(ACC) == final
    assert trace.records[-1].addend == 0 and trace.records[-1].b is None


def test_mac_order_independent_without_saturation():
    rng = np.random.default_rng(5)
    pairs = [(LogCode.of(int(rng.choice([-1, 1])), int(rng.integers(-4, 1))),
              LogCode.of(int(rng.choice([-1, 1])), int(rng.integers(-4, 1)))) for _ in range(64)]
    a = mac_sequence(ACC, pairs)
    for _ in range(5):
        rng.shuffle(pairs)
        assert mac_sequence(ACC, pairs) == a


def test_shift_mac():
    acc = shift_mac(ACC, LogCode.of(-1, -2), 3 << 12, 15)  # -(0.375 / 4)
    assert acc.real == -0.09375


def test_elementwise_mul_log():
    w = (-4, 0)
    assert elementwise_mul_log(LogCode.of(1, -1), LogCode.of(1, -2), w) == LogCode.of(1, -3)
    assert elementwise_mul_log(LogCode.zero(), LogCode.of(1, -2), w) == LogCode.zero()
    assert elementwise_mul_log(LogCode.of(-1, 0), LogCode.of(-1, -4), w) == LogCode.of(1, -4)
    assert elementwise_mul_log(LogCode.of(1, -3), LogCode.of(1, -4), w) == LogCode.of(1, -4)


def test_fixed_helpers():
    assert to_fixed(0.5, 15) == 16384
    assert to_fixed(1.0, 15) == 32767
    assert to_fixed(-1.0, 15) == -32768
    assert to_fixed(-3 / 2 ** 16, 15) == -2
    xs = np.random.default_rng(0).uniform(-40, 40, 2000)
    assert to_fixed_array(xs, 10).tolist() == [to_fixed(float(x), 10) for x in xs]
    for a, b in [(12345, -321), (-32768, 32767), (7, 9)]:
        assert fixed_mul(a, 15, b, 10, 10) == round_half_away(Fraction(a * b, 1 << 15))


def test_engine_validation():
    with pytest.raises(ValueError):
        Engine(shift_min=-11)
    with pytest.raises(ValueError):
        Engine(accum_mode="maxplus")


# -- layers --------------------------------------------------------------------------------

def _conv(cin, h, w, k, cout, act=Activation.RELU):
    return LayerSpec(LayerKind.CONV, "c", act, in_channels=cin, in_height=h, in_width=w, kernel=k, out_channels=cout)


def test_zero_input_gives_activated_bias():
    l = _conv(2, 3, 3, 3, 2, Activation.TANH)
    w = quantize_tensor(np.ones(l.weight_shape), QuantSpec.weight())
    out = layer_forward_quant(l, LogTensor.zeros((2, 3, 3)), w, [0.5, -0.25])
    q = QuantConfig().spec_for(Activation.TANH)
    assert out.codes[:9] == [quantize(math.tanh(0.5), q)] * 9
    assert out.codes[9:] == [quantize(math.tanh(-0.25), q)] * 9


def test_one_by_one_identity():
    l = _conv(1, 3, 4, 1, 1)
    x = quantize_tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 4)), QuantConfig().spec_for(Activation.RELU))
    w = LogTensor.from_codes([LogCode.of(1, 0)], (1, 1, 1, 1))
    assert layer_forward_quant(l, x, w, [0.0]) == x


def test_conv_accumulator_matches_power_of_two_sum():
    rng = np.random.default_rng(8)
    l = _conv(3, 4, 5, 3, 4, Activation.NONE)
    x = quantize_tensor(rng.uniform(-1, 1, (3, 4, 5)), QuantSpec.tanh())
    w = quantize_tensor(rng.normal(0, 0.5, l.weight_shape), QuantSpec.weight())
    st = LayerStats()
    big = Engine(acc_width=24)  # no saturation, so the sum is the plain sum
    out = layer_forward_quant(l, x, w, np.zeros(4), Mode.ULQ, engine=big, stats=st)
    xv, wv = x.values(), w.values()
    for o in range(4):
        for yy in range(4):
            for xx in range(5):
                s = 0.0
                for c in range(3):
                    for ky in range(3):
                        for kx in range(3):
                            iy, ix = yy + ky - 1, xx + kx - 1
                            if 0 <= iy < 4 and 0 <= ix < 5:
                                b = wv[o, c, ky, kx] * xv[c, iy, ix]
                                s += 0.0 if abs(b) < 2 ** -7 else math.copysign(min(abs(b), 1.0), b)
                want = quantize(s, QuantConfig().spec_for(Activation.NONE))
                assert out[(o * 4 + yy) * 5 + xx] == want
    assert st.macs == 4 * 20 * 27


def test_vectorized_layer_matches_mac_loop():
    rng = np.random.default_rng(11)
    l = LayerSpec(LayerKind.FC, "f", Activation.TANH, in_dim=40, out_dim=7)
    x = quantize_tensor(rng.uniform(-1, 1, 40), QuantSpec.tanh())
    w = quantize_tensor(rng.normal(0, 2, (7, 40)), QuantSpec.weight())
    bias = rng.normal(0, 20, 7)
    st = LayerStats()
    out = layer_forward_quant(l, x, w, bias, stats=st)
    sat = 0
    for o in range(7):
        acc = Accumulator.for_engine(value=to_fixed(bias[o], 10))
        for r in range(40):
            acc = mac_step(acc, w[o * 40 + r], x[r])
        sat += acc.saturated
        v = math.tanh(acc.real)
        assert out[o] == logq(to_fixed(v, 15), 15, QuantSpec.tanh())
    assert st.acc_saturations == sat and sat > 0


def test_mode_type_checks():
    l = LayerSpec(LayerKind.FC, "f", Activation.TANH, in_dim=2, out_dim=1)
    w = LogTensor.zeros((1, 2))
    with pytest.raises(TypeError):
        layer_forward_quant(l, FixedTensor(np.zeros(2), 15), w, [0.0], Mode.ULQ)
    with pytest.raises(TypeError):
        layer_forward_quant(l, LogTensor.zeros((2,)), w, [0.0], Mode.P2QNN)


# -- whole network -------------------------------------------------------------------------

def test_zero_net_uniform():
    net = eegnet_spec(conv_channels=(2,), fc1=8, lstm_hidden=2, time_steps=3, fc2=4)
    m = quantize_model(Model.zeros(net))
    for mode in Mode:
        p, _ = infer_quant(m, np.zeros((1, 10, 11)), mode)
        np.testing.assert_allclose(p, np.full(6, 1 / 6), rtol=1e-15)


def test_requires_log_weights():
    with pytest.raises(TypeError):
        infer_quant(Model.zeros(eegnet_spec(conv_channels=(2,), fc1=4, lstm_hidden=2, fc2=3)), np.zeros((10, 11)))


@pytest.mark.parametrize("seed", range(40))
def test_tiny_nets_match_oracle(seed):
    model, qcfg, frames = random_tiny_model(np.random.default_rng(1000 + seed))
    for mode, log_acts in ((Mode.ULQ, True), (Mode.P2QNN, False)):
        scores, stats = infer_quant(model, frames, mode, qcfg)
        logits, probs = oracle_infer(model, frames, qcfg, log_acts)
        assert stats.layers["sm"].logits_raw == logits
        np.testing.assert_allclose(scores, probs, rtol=1e-12)


def test_p2qnn_equals_ulq_without_activation_quantization():
    model, qcfg, frames = random_tiny_model(np.random.default_rng(77))
    a, _ = infer_quant(model, frames, Mode.P2QNN, qcfg)
    b, _ = infer_quant(model, frames, Mode.ULQ, qcfg, quantize_activations=False)
    assert np.array_equal(a, b)


def test_stats_report_histograms():
    model, qcfg, frames = random_tiny_model(np.random.default_rng(3))
    _, st = infer_quant(model, frames, Mode.ULQ, qcfg)
    d = st.to_dict()
    assert set(d) == {l.name for l in model.net.layers}
    assert sum(d["c1"]["histogram"].values()) == model.net.layers[0].output_size * (
        model.net.time_steps if model.net.per_step_conv else 1)
