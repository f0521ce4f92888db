"""Bit-exact functional model of the LogAccu data path.

Pieces, in pipeline order:

* ``log2_unit``: shift-normalizes a positive fixed-point value into (1, 2]
  (integer part ``-k``) and reads the fraction from an 8 KB table.
* ``logq``: sign extraction, ``log2_unit``, eRound, eClip. Must agree with
  :mod:`mindreading.ulq` for every representable input.
* ``exp_add4`` / ``bshift`` / ``mac_step``: exponent addition on a 4-bit
  saturating adder, ``bitshift(1, B)`` on the PSE array, and linear
  accumulation into a 16-bit fixed-point accumulator.
* ``layer_forward_quant`` / ``infer_quant``: whole-layer and whole-network
  quantized inference, vectorized with numpy but bit-identical to repeated
  ``mac_step`` calls.

Fixed-point values are passed as ``(raw, frac_bits)`` integer pairs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Union

import numpy as np

from . import photonic
from .eegnet import Activation, LayerKind, LayerSpec, Model, ShapeError, _frames_for, im2col, softmax
from .ulq import (InvalidInputError, LogCode, LogTensor, QuantKind, QuantSpec, clip, round_nearest)

WORD_BITS = 16
ACT_FRAC = 15  # Q1.15 for tanh/sigmoid outputs and normalized EEG samples
LUT_MAX_BYTES = 8 * 1024
_P = 40  # guard bits for the normalized mantissa


class Mode(str, enum.Enum):
    P2QNN = "p2qnn"
    ULQ = "ulq"


# -- Log2 unit -------------------------------------------------------------------

@dataclass(frozen=True)
class Log2Lut:
    """Fraction table for ``log2(m')``, ``m'`` in (1, 2].

    Entry ``i`` holds ``log2(1 + (i+1)/entry_count)`` rounded to ``frac_bits``;
    ``log2(1) = 0`` is implicit. Lookups interpolate linearly between
    neighbouring entries unless ``interpolate`` is off.
    """

    entry_count: int = 2048
    frac_bits: int = 16
    interpolate: bool = True
    entry_bytes: int = 4
    entries: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = self.entry_count
        if n < 1 or n & (n - 1):
            raise ValueError(f"entry_count must be a power of two, got {n}")
        if self.size_bytes > LUT_MAX_BYTES:
            raise ValueError(f"table of {self.size_bytes} bytes exceeds {LUT_MAX_BYTES}")
        if (1 << self.frac_bits) >= 1 << (8 * self.entry_bytes):
            raise ValueError("entries do not fit the entry width")
        scale = 1 << self.frac_bits
        ent = np.array([round(math.log2(1 + (i + 1) / n) * scale) for i in range(n)], dtype=np.int64)
        ent.setflags(write=False)
        object.__setattr__(self, "entries", ent)

    @property
    def size_bytes(self) -> int:
        return self.entry_count * self.entry_bytes

    @property
    def lsb(self) -> float:
        return 2.0 ** -self.frac_bits


@lru_cache(maxsize=None)
def default_lut() -> Log2Lut:
    return Log2Lut()


def normalize_shift(raw: int, frac_bits: int) -> int:
    """Smallest ``k`` with ``2**k * m`` in (1, 2] for ``m = raw / 2**frac_bits``."""
    n = raw.bit_length()
    if raw == 1 << (n - 1):
        return frac_bits - n + 2
    return frac_bits - n + 1


def _lut_fraction(t: int, lut: Log2Lut) -> int:
    # t = (m' - 1) * 2**_P, in (0, 2**_P]
    e = lut.entry_count
    ent = lut.entries
    if not lut.interpolate:
        i = -(-t * e // (1 << _P)) - 1
        return int(ent[i])
    q, r = divmod(t * e, 1 << _P)
    if q == e:
        return int(ent[e - 1])
    g0 = 0 if q == 0 else int(ent[q - 1])
    g1 = int(ent[q])
    num = (g0 << _P) + (g1 - g0) * r
    return (num + (1 << (_P - 1))) >> _P


def log2_unit(raw: int, frac_bits: int, lut: Log2Lut | None = None) -> int:
    """``log2(raw / 2**frac_bits)`` as a fixed-point integer with ``lut.frac_bits`` fraction bits."""
    lut = lut or default_lut()
    raw = int(raw)
    if raw <= 0:
        raise InvalidInputError(f"log2 unit domain is m > 0, got raw={raw}")
    if raw >= 1 << 31:
        raise InvalidInputError(f"log2 unit input must be below 2**31, got raw={raw}")
    k = normalize_shift(raw, frac_bits)
    sh = k - frac_bits + _P
    mant = raw << sh if sh >= 0 else raw >> -sh  # never drops bits: raw < 2**31 < 2**_P
    return (-k << lut.frac_bits) + _lut_fraction(mant - (1 << _P), lut)


def log2_unit_array(raw: np.ndarray, frac_bits, lut: Log2Lut | None = None) -> np.ndarray:
    """Vectorized :func:`log2_unit`; ``raw`` must be positive and below 2**31."""
    lut = lut or default_lut()
    raw = np.asarray(raw, dtype=np.int64)
    if raw.size and (raw.min() <= 0 or raw.max() >= 1 << 31):
        raise InvalidInputError("log2 unit inputs must lie in (0, 2**31)")
    frac_bits = np.broadcast_to(np.asarray(frac_bits, dtype=np.int64), raw.shape)
    _, n = np.frexp(raw.astype(np.float64))  # exact bit length for raw < 2**53
    n = n.astype(np.int64)
    pow2 = raw == (np.int64(1) << (n - 1))
    k = frac_bits - n + 1 + pow2
    mant = raw << (_P - n + 1 + pow2)
    t = mant - (np.int64(1) << _P)
    e = lut.entry_count
    ent = lut.entries
    if not lut.interpolate:
        i = -((-t * e) >> _P) - 1
        frac = ent[i]
    else:
        te = t * e
        q = te >> _P
        r = te & ((np.int64(1) << _P) - 1)
        full = q == e
        qc = np.minimum(q, e - 1)
        g0 = np.where(qc == 0, 0, ent[np.maximum(qc - 1, 0)])
        g1 = ent[qc]
        num = (g0 << _P) + (g1 - g0) * r
        frac = np.where(full, ent[e - 1], (num + (np.int64(1) << (_P - 1))) >> _P)
    return (-k << lut.frac_bits) + frac


def eround(v: int, frac_bits: int) -> int:
    """Round a fixed-point value to the nearest integer, ties away from zero."""
    half = 1 << (frac_bits - 1)
    if v >= 0:
        return (v + half) >> frac_bits
    return -((-v + half) >> frac_bits)


def eround_array(v: np.ndarray, frac_bits: int) -> np.ndarray:
    half = np.int64(1) << (frac_bits - 1)
    mag = (np.abs(v) + half) >> frac_bits
    return np.where(v < 0, -mag, mag)


_UNSIGNED = (QuantKind.SIGMOID, QuantKind.RELU)


def logq(raw: int, frac_bits: int, spec: QuantSpec, lut: Log2Lut | None = None) -> LogCode:
    """Hardware-path quantizer: Log2 unit, then eRound, then eClip."""
    lut = lut or default_lut()
    raw = int(raw)
    if raw == 0:
        return LogCode.zero()
    if raw < 0 and spec.kind in _UNSIGNED:
        raise InvalidInputError(f"{spec.kind.value} quantizer expects x >= 0, got raw={raw}")
    lo, hi = spec.window
    e = eround(log2_unit(abs(raw), frac_bits, lut), lut.frac_bits)
    return LogCode.of(-1 if raw < 0 else 1, clip(e, lo, hi))


def logq_array(raw, frac_bits, spec: QuantSpec, lut: Log2Lut | None = None) -> LogTensor:
    lut = lut or default_lut()
    raw = np.asarray(raw, dtype=np.int64)
    flat = raw.reshape(-1)
    if spec.kind in _UNSIGNED and (flat < 0).any():
        raise InvalidInputError(f"{spec.kind.value} quantizer got a negative input")
    zero = flat == 0
    mag = np.where(zero, 1, np.abs(flat))
    fb = np.broadcast_to(np.asarray(frac_bits), raw.shape).reshape(-1)
    lo, hi = spec.window
    e = np.clip(eround_array(log2_unit_array(mag, fb, lut), lut.frac_bits), lo, hi)
    return LogTensor(raw.shape, zero, np.where(flat < 0, -1, 1), e, spec)


def to_fixed(x: float, frac_bits: int, width: int = WORD_BITS) -> int:
    """Round a real to a signed ``width``-bit fixed-point word (ties away from zero, saturating)."""
    v = round_nearest(x * 2.0 ** frac_bits)
    return clip(v, -(1 << (width - 1)), (1 << (width - 1)) - 1)


def to_fixed_array(x, frac_bits: int, width: int = WORD_BITS) -> np.ndarray:
    y = np.abs(np.asarray(x, dtype=np.float64)) * 2.0 ** frac_bits
    if not np.isfinite(y).all():
        raise InvalidInputError("cannot convert non-finite values to fixed point")
    fl = np.floor(y)
    mag = (fl + (y - fl >= 0.5)).astype(np.int64)
    v = np.where(np.asarray(x) < 0, -mag, mag)
    return np.clip(v, -(1 << (width - 1)), (1 << (width - 1)) - 1)


# -- MAC path --------------------------------------------------------------------

@dataclass(frozen=True)
class Engine:
    """Data-path geometry shared by every MAC-level operation."""

    acc_width: int = 16
    acc_frac: int = 10
    exp_bits: int = 4
    shift_min: int = -7
    shift_max: int = 0
    lut: Log2Lut = field(default_factory=default_lut)
    accum_mode: str = "linear"

    def __post_init__(self):
        if self.accum_mode != "linear":
            raise ValueError(f"only linear accumulation is implemented, got {self.accum_mode!r}")
        if self.shift_min > self.shift_max:
            raise ValueError("shift_min must not exceed shift_max")
        if self.shift_min < -self.acc_frac:
            raise ValueError("Bshifter range reaches below the accumulator LSB")
        if self.shift_max + self.acc_frac >= self.acc_width - 1:
            raise ValueError("Bshifter range overflows the accumulator")

    @property
    def acc_min(self) -> int:
        return -(1 << (self.acc_width - 1))

    @property
    def acc_max(self) -> int:
        return (1 << (self.acc_width - 1)) - 1

    @property
    def exp_min(self) -> int:
        return -(1 << (self.exp_bits - 1))

    @property
    def exp_max(self) -> int:
        return (1 << (self.exp_bits - 1)) - 1

    @property
    def pse_width(self) -> int:
        return self.shift_max - self.shift_min + 1


DEFAULT_ENGINE = Engine()


@dataclass(frozen=True)
class Accumulator:
    """Signed fixed-point accumulator; saturation clamps and latches ``saturated``."""

    value: int = 0
    saturated: bool = False
    width: int = 16
    frac: int = 10

    @classmethod
    def for_engine(cls, engine: Engine = DEFAULT_ENGINE, value: int = 0) -> "Accumulator":
        return cls(value, False, engine.acc_width, engine.acc_frac)

    def add(self, delta: int) -> "Accumulator":
        lo, hi = -(1 << (self.width - 1)), (1 << (self.width - 1)) - 1
        v = self.value + int(delta)
        sat = self.saturated or v < lo or v > hi
        return Accumulator(min(max(v, lo), hi), sat, self.width, self.frac)

    @property
    def real(self) -> float:
        return math.ldexp(self.value, -self.frac)


def exp_add4(a: int, b: int, bits: int = 4) -> int:
    """Exponent sum on a ``bits``-wide two's-complement adder, saturating at both ends."""
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return min(max(a + b, lo), hi)


def bshift(b: int, engine: Engine = DEFAULT_ENGINE) -> int:
    """``bitshift(1, b)`` in accumulator units.

    Positions below ``shift_min`` (including the adder's saturated minimum)
    leave every disk dark and the addend underflows to 0; positions above
    ``shift_max`` clamp to the top disk.
    """
    onehot = photonic.bshift_pse(b - engine.shift_min, engine.pse_width)
    return onehot << (engine.acc_frac + engine.shift_min)


def mac_step(acc: Accumulator, w: LogCode, x: LogCode, engine: Engine = DEFAULT_ENGINE) -> Accumulator:
    if w.is_zero or x.is_zero:
        return acc
    b = exp_add4(w.exponent, x.exponent, engine.exp_bits)
    return acc.add(w.sign * x.sign * bshift(b, engine))


def shift_fixed(raw: int, e: int) -> int:
    """``raw * 2**e`` on a logical shifter; right shifts floor (arithmetic shift)."""
    return raw << e if e >= 0 else raw >> -e


def shift_mac(acc: Accumulator, w: LogCode, x_raw: int, x_frac: int) -> Accumulator:
    """P2QNN MAC: power-of-two weight times a fixed-point input, as a shift."""
    if w.is_zero:
        return acc
    return acc.add(w.sign * shift_fixed(int(x_raw), w.exponent + acc.frac - x_frac))


def elementwise_mul_log(a: LogCode, b: LogCode, window: tuple[int, int]) -> LogCode:
    if a.is_zero or b.is_zero:
        return LogCode.zero()
    return LogCode.of(a.sign * b.sign, clip(a.exponent + b.exponent, *window))


def fixed_mul(a: int, fa: int, b: int, fb: int, fout: int) -> int:
    """Electrical fixed-point product, rounded half away from zero to ``fout`` fraction bits."""
    p = a * b
    s = fa + fb - fout
    if s <= 0:
        return p << -s
    mag = (abs(p) + (1 << (s - 1))) >> s
    return -mag if p < 0 else mag


class MacRecord(NamedTuple):
    w: LogCode
    x: LogCode
    b: int | None
    addend: int
    acc: int


@dataclass
class MacTrace:
    records: list[MacRecord] = field(default_factory=list)

    def replay(self, start: Accumulator) -> Accumulator:
        acc = start
        for r in self.records:
            acc = acc.add(r.addend)
        return acc


def mac_sequence(acc: Accumulator, pairs, engine: Engine = DEFAULT_ENGINE, trace: MacTrace | None = None) -> Accumulator:
    for w, x in pairs:
        if w.is_zero or x.is_zero:
            b, addend = None, 0
        else:
            b = exp_add4(w.exponent, x.exponent, engine.exp_bits)
            addend = w.sign * x.sign * bshift(b, engine)
        acc = acc.add(addend)
        if trace is not None:
            trace.records.append(MacRecord(w, x, b, addend, acc.value))
    return acc


# -- quantized tensors -----------------------------------------------------------

@dataclass
class FixedTensor:
    """Fixed-point activations; ``frac`` may differ per element."""

    raw: np.ndarray
    frac: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.int64)
        self.frac = np.broadcast_to(np.asarray(self.frac, dtype=np.int64), self.raw.shape).copy()

    @property
    def shape(self):
        return self.raw.shape

    def values(self) -> np.ndarray:
        return np.ldexp(self.raw.astype(np.float64), -self.frac)

    def reshape(self, *shape) -> "FixedTensor":
        return FixedTensor(self.raw.reshape(*shape), self.frac.reshape(*shape))

    def __eq__(self, other):
        if not isinstance(other, FixedTensor):
            return NotImplemented
        return np.array_equal(self.raw, other.raw) and np.array_equal(self.frac, other.frac)


Act = Union[LogTensor, FixedTensor]


@dataclass(frozen=True)
class QuantConfig:
    """Activation quantizer offsets; weights carry their own spec."""

    bits: int = 4
    alpha: int = 0
    beta: int = 1
    theta: int = 0

    def spec_for(self, act: Activation) -> QuantSpec:
        act = Activation(act)
        if act is Activation.SIGMOID:
            return QuantSpec.sigmoid(self.bits, self.beta)
        if act is Activation.RELU:
            return QuantSpec.relu(self.bits, self.theta)
        # tanh, and signed pre-activation values
        return QuantSpec.tanh(self.bits, self.alpha)

    @property
    def input_spec(self) -> QuantSpec:
        return QuantSpec.tanh(self.bits, self.alpha)


def act_frac(act: Activation, engine: Engine = DEFAULT_ENGINE) -> int:
    return ACT_FRAC if Activation(act) in (Activation.TANH, Activation.SIGMOID) else engine.acc_frac


@dataclass
class LayerStats:
    macs: int = 0
    exp_saturations: int = 0
    shift_underflows: int = 0
    shift_clamps: int = 0
    acc_saturations: int = 0
    histogram: dict = field(default_factory=dict)
    logits_raw: list | None = None  # softmax layer only: accumulator words before eSoftmax

    def record_codes(self, t: Act) -> None:
        if not isinstance(t, LogTensor):
            return
        h = self.histogram
        nz = int(t.is_zero.sum())
        if nz:
            h["zero"] = h.get("zero", 0) + nz
        vals, counts = np.unique(t.exponent[~t.is_zero], return_counts=True)
        for v, c in zip(vals.tolist(), counts.tolist()):
            h[str(v)] = h.get(str(v), 0) + c

    def to_dict(self) -> dict:
        return {"macs": self.macs, "exp_saturations": self.exp_saturations,
                "shift_underflows": self.shift_underflows, "shift_clamps": self.shift_clamps,
                "acc_saturations": self.acc_saturations,
                "histogram": dict(sorted(self.histogram.items())),
                **({"logits_raw": self.logits_raw} if self.logits_raw is not None else {})}


@dataclass
class QuantStats:
    layers: dict[str, LayerStats] = field(default_factory=dict)

    def layer(self, name: str) -> LayerStats:
        return self.layers.setdefault(name, LayerStats())

    @property
    def total_acc_saturations(self) -> int:
        return sum(s.acc_saturations for s in self.layers.values())

    def to_dict(self) -> dict:
        return {name: s.to_dict() for name, s in self.layers.items()}


# -- vectorized reduction --------------------------------------------------------

_CHUNK = 1 << 22


def _sat(v: np.ndarray, engine: Engine) -> np.ndarray:
    return np.clip(v, engine.acc_min, engine.acc_max)


def _log_terms(wz, ws, we, xz, xs, xe, engine: Engine, st: LayerStats) -> np.ndarray:
    # w*: (M, 1, R); x*: (1, P, R)
    live = ~(wz | xz)
    s = we.astype(np.int64) + xe
    b = np.clip(s, engine.exp_min, engine.exp_max)
    st.exp_saturations += int(((b != s) & live).sum())
    under = b < engine.shift_min
    over = b > engine.shift_max
    st.shift_underflows += int((under & live).sum())
    st.shift_clamps += int((over & live).sum())
    b = np.minimum(b, engine.shift_max)
    mag = np.left_shift(np.int64(1), np.maximum(b + engine.acc_frac, 0))
    return np.where(live & ~under, (ws * xs).astype(np.int64) * mag, 0)


def _fixed_terms(wz, ws, we, xr, xf, engine: Engine) -> np.ndarray:
    sh = we.astype(np.int64) + engine.acc_frac - xf
    xr = np.broadcast_to(xr, np.broadcast_shapes(xr.shape, sh.shape))
    shifted = np.where(sh >= 0, xr << np.maximum(sh, 0), xr >> np.maximum(-sh, 0))
    return np.where(wz, 0, ws.astype(np.int64) * shifted)


def _accumulate(bias: np.ndarray, terms: np.ndarray, engine: Engine, st: LayerStats) -> np.ndarray:
    """Sequentially accumulate ``terms`` (M, P, R) on top of ``bias`` (M,) with per-step saturation."""
    m, p, _ = terms.shape
    start = np.broadcast_to(bias[:, None], (m, p))
    part = start[..., None] + np.cumsum(terms, axis=-1)
    out = part[..., -1] if terms.shape[-1] else start.copy()
    bad = ((part < engine.acc_min) | (part > engine.acc_max)).any(axis=-1)
    if bad.any():
        out = out.copy()
        for i, j in zip(*np.nonzero(bad)):
            acc = Accumulator.for_engine(engine, int(start[i, j]))
            for t in terms[i, j].tolist():
                acc = acc.add(t)
            out[i, j] = acc.value
        st.acc_saturations += int(bad.sum())
    return out


def _reduce(w: LogTensor, x: Act, bias_raw: np.ndarray, engine: Engine, st: LayerStats) -> np.ndarray:
    """Accumulate ``sum_r w[m, r] * x[p, r]`` for every (m, p); returns raw (M, P)."""
    mm, r = w.shape
    pp = x.shape[0]
    wz = w.is_zero.reshape(mm, 1, r)
    ws = w.sign.reshape(mm, 1, r)
    we = w.exponent.reshape(mm, 1, r)
    if isinstance(x, LogTensor):
        xz, xs, xe = (a.reshape(1, pp, r) for a in (x.is_zero, x.sign, x.exponent))
    else:
        xr, xf = x.raw.reshape(1, pp, r), x.frac.reshape(1, pp, r)
    step = max(1, _CHUNK // max(1, pp * r))
    out = np.empty((mm, pp), dtype=np.int64)
    for a in range(0, mm, step):
        sl = slice(a, a + step)
        if isinstance(x, LogTensor):
            terms = _log_terms(wz[sl], ws[sl], we[sl], xz, xs, xe, engine, st)
        else:
            terms = _fixed_terms(wz[sl], ws[sl], we[sl], xr, xf, engine)
        out[sl] = _accumulate(bias_raw[sl], terms, engine, st)
    st.macs += mm * pp * r
    return out


def _activate(acc_raw: np.ndarray, act: Activation, quantize: bool, qcfg: QuantConfig,
              engine: Engine) -> Act:
    v = np.ldexp(acc_raw.astype(np.float64), -engine.acc_frac)
    a = _eactivation(v, act)
    f = act_frac(act, engine)
    fx = to_fixed_array(a, f)
    if quantize:
        return logq_array(fx, f, qcfg.spec_for(act), engine.lut)
    return FixedTensor(fx, f)


def _eactivation(v: np.ndarray, act: Activation) -> np.ndarray:
    act = Activation(act)
    if act is Activation.RELU:
        return np.maximum(v, 0.0)
    if act is Activation.TANH:
        return np.tanh(v)
    if act is Activation.SIGMOID:
        return 1.0 / (1.0 + np.exp(-v))
    return v


def _flat(x: Act) -> Act:
    return x.reshape(-1)


def _as_rows(x: Act) -> Act:
    return x.reshape(1, -1)


def _patches(x: Act, layer: LayerSpec) -> Act:
    c, h, w = layer.in_channels, layer.in_height, layer.in_width
    if tuple(x.shape) != (c, h, w):
        raise ShapeError(f"{layer.name}: input shape {tuple(x.shape)} != {(c, h, w)}")
    idx = im2col(np.arange(1, c * h * w + 1, dtype=np.float64).reshape(c, h, w),
                 layer.kernel, layer.stride, layer.padding).astype(np.int64) - 1
    pad = idx < 0
    src = np.maximum(idx, 0)
    if isinstance(x, LogTensor):
        return LogTensor(idx.shape, np.where(pad, True, x.is_zero[src]), x.sign[src], x.exponent[src], x.spec)
    raw, frac = x.raw.reshape(-1), x.frac.reshape(-1)
    return FixedTensor(np.where(pad, 0, raw[src]), np.where(pad, ACT_FRAC, frac[src]))


def _check_quant_input(x: Act, quantize: bool, where: str) -> None:
    if quantize and not isinstance(x, LogTensor):
        raise TypeError(f"{where}: ULQ mode expects log-coded inputs")
    if not quantize and not isinstance(x, FixedTensor):
        raise TypeError(f"{where}: P2QNN mode expects fixed-point inputs")


def layer_forward_quant(layer: LayerSpec, inputs: Act, weights: LogTensor, bias, mode=Mode.ULQ,
                        qcfg: QuantConfig = QuantConfig(), engine: Engine = DEFAULT_ENGINE,
                        stats: LayerStats | None = None, quantize_activations: bool = True):
    """One conv / FC / softmax layer on the quantized engine.

    Returns the activation tensor (log codes in ULQ mode, fixed point in P2QNN
    mode); the softmax layer returns class probabilities.
    """
    mode = Mode(mode)
    quantize = mode is Mode.ULQ and quantize_activations
    st = stats if stats is not None else LayerStats()
    _check_quant_input(inputs, quantize, layer.name)
    if tuple(weights.shape) != layer.weight_shape:
        raise ShapeError(f"{layer.name}: weight shape {weights.shape} != {layer.weight_shape}")
    bias_raw = to_fixed_array(np.asarray(bias, dtype=np.float64), engine.acc_frac, engine.acc_width)
    w2 = weights.reshape(layer.weight_shape[0], -1)
    if layer.kind is LayerKind.CONV:
        acc = _reduce(w2, _patches(inputs, layer), bias_raw, engine, st).reshape(layer.output_shape)
    elif layer.kind in (LayerKind.FC, LayerKind.SOFTMAX):
        if int(np.prod(inputs.shape)) != layer.in_dim:
            raise ShapeError(f"{layer.name}: expected {layer.in_dim} inputs, got {int(np.prod(inputs.shape))}")
        acc = _reduce(w2, _as_rows(_flat(inputs)), bias_raw, engine, st)[:, 0]
    else:
        raise ShapeError(f"{layer.name}: use lstm_forward_quant for LSTM layers")
    if layer.kind is LayerKind.SOFTMAX:
        st.logits_raw = [int(v) for v in acc]
        return softmax(np.ldexp(acc.astype(np.float64), -engine.acc_frac))
    out = _activate(acc, layer.activation, quantize, qcfg, engine)
    st.record_codes(out)
    return out


def _concat(a: Act, b: Act) -> Act:
    if isinstance(a, LogTensor) and isinstance(b, LogTensor):
        return LogTensor((len(a) + len(b),), np.concatenate([a.is_zero, b.is_zero]),
                         np.concatenate([a.sign, b.sign]), np.concatenate([a.exponent, b.exponent]))
    if isinstance(a, FixedTensor) and isinstance(b, FixedTensor):
        return FixedTensor(np.concatenate([a.raw.reshape(-1), b.raw.reshape(-1)]),
                           np.concatenate([a.frac.reshape(-1), b.frac.reshape(-1)]))
    raise TypeError("cannot mix log-coded and fixed-point activations")


def _sat_add(a: np.ndarray, b: np.ndarray, engine: Engine, st: LayerStats) -> np.ndarray:
    s = a + b
    out = _sat(s, engine)
    st.acc_saturations += int((out != s).sum())
    return out


def _slice_act(t: Act, sl: slice) -> Act:
    if isinstance(t, LogTensor):
        n = len(range(*sl.indices(len(t))))
        return LogTensor((n,), t.is_zero[sl], t.sign[sl], t.exponent[sl], t.spec)
    return FixedTensor(t.raw[sl], t.frac[sl])


@dataclass
class QuantLstmState:
    h: Act
    c: np.ndarray  # raw accumulator words


def lstm_init_state(layer: LayerSpec, quantize: bool) -> QuantLstmState:
    n = layer.hidden_dim
    h = LogTensor.zeros((n,)) if quantize else FixedTensor(np.zeros(n, np.int64), ACT_FRAC)
    return QuantLstmState(h, np.zeros(n, np.int64))


def lstm_step_quant(layer: LayerSpec, state: QuantLstmState, x: Act, weights: LogTensor, bias_raw: np.ndarray,
                    quantize: bool, qcfg: QuantConfig, engine: Engine, st: LayerStats) -> QuantLstmState:
    n = layer.hidden_dim
    z = _concat(_flat(x), _flat(state.h))
    if len(z.raw if isinstance(z, FixedTensor) else z) != layer.input_dim + n:
        raise ShapeError(f"{layer.name}: expected {layer.input_dim} inputs")
    acc = _reduce(weights, _as_rows(z), bias_raw, engine, st)[:, 0]
    i_g = _activate(acc[:n], Activation.SIGMOID, quantize, qcfg, engine)
    f_g = _activate(acc[n:2 * n], Activation.SIGMOID, quantize, qcfg, engine)
    j_g = _activate(acc[2 * n:3 * n], Activation.TANH, quantize, qcfg, engine)
    o_g = _activate(acc[3 * n:], Activation.SIGMOID, quantize, qcfg, engine)
    fa = engine.acc_frac
    tanh_win = qcfg.spec_for(Activation.TANH).window
    if quantize:
        # forget gate scales the stored cell word on the shifter
        e = f_g.exponent.astype(np.int64)
        fc = np.where(f_g.is_zero, 0, np.where(e >= 0, state.c << np.maximum(e, 0), state.c >> np.maximum(-e, 0)))
        ij = _mul_log_array(i_g, j_g, tanh_win)
        under = (~ij.is_zero) & (ij.exponent.astype(np.int64) + fa < 0)
        st.shift_underflows += int(under.sum())
        mag = np.left_shift(np.int64(1), np.maximum(ij.exponent.astype(np.int64) + fa, 0))
        ij_raw = np.where(ij.is_zero | under, 0, ij.sign.astype(np.int64) * mag)
    else:
        fc = _fixed_mul_array(f_g.raw, ACT_FRAC, state.c, fa, fa)
        ij_raw = _fixed_mul_array(i_g.raw, ACT_FRAC, j_g.raw, ACT_FRAC, fa)
    c = _sat_add(_sat(fc, engine), ij_raw, engine, st)
    st.acc_saturations += int((_sat(fc, engine) != fc).sum())
    t = _activate(c, Activation.TANH, quantize, qcfg, engine)
    if quantize:
        h = _mul_log_array(o_g, t, tanh_win)
    else:
        h = FixedTensor(_fixed_mul_array(o_g.raw, ACT_FRAC, t.raw, ACT_FRAC, ACT_FRAC), ACT_FRAC)
    st.record_codes(h)
    return QuantLstmState(h, c)


def _mul_log_array(a: LogTensor, b: LogTensor, window) -> LogTensor:
    zero = a.is_zero | b.is_zero
    e = np.clip(a.exponent.astype(np.int64) + b.exponent, *window)
    return LogTensor(a.shape, zero, a.sign * b.sign, e)


def _fixed_mul_array(a, fa, b, fb, fout) -> np.ndarray:
    p = np.asarray(a, np.int64) * np.asarray(b, np.int64)
    s = fa + fb - fout
    if s <= 0:
        return p << -s
    mag = (np.abs(p) + (np.int64(1) << (s - 1))) >> s
    return np.where(p < 0, -mag, mag)


def lstm_forward_quant(layer: LayerSpec, seq: list, weights: LogTensor, bias, mode=Mode.ULQ,
                       qcfg: QuantConfig = QuantConfig(), engine: Engine = DEFAULT_ENGINE,
                       stats: LayerStats | None = None, quantize_activations: bool = True) -> list:
    mode = Mode(mode)
    quantize = mode is Mode.ULQ and quantize_activations
    st = stats if stats is not None else LayerStats()
    bias_raw = to_fixed_array(np.asarray(bias, dtype=np.float64), engine.acc_frac, engine.acc_width)
    w2 = weights.reshape(layer.weight_shape)
    state = lstm_init_state(layer, quantize)
    out = []
    for x in seq:
        _check_quant_input(x, quantize, layer.name)
        state = lstm_step_quant(layer, state, x, w2, bias_raw, quantize, qcfg, engine, st)
        out.append(state.h)
    return out


def quantize_model(model: Model, bits: int = 4, alpha: int = 0) -> Model:
    """Quantize float weights to log codes (biases stay float)."""
    from .ulq import quantize_tensor
    if model.dtype != "float32":
        raise TypeError("model is already quantized")
    spec = QuantSpec.weight(bits, alpha)
    ws = [quantize_tensor(np.asarray(w, np.float64), spec) for w in model.weights]
    return Model(model.net, ws, [np.asarray(b, np.float32) for b in model.biases], bits, alpha)


def ingest(frame, quantize: bool, qcfg: QuantConfig, engine: Engine = DEFAULT_ENGINE) -> Act:
    fx = to_fixed_array(frame, ACT_FRAC)
    if quantize:
        return logq_array(fx, ACT_FRAC, qcfg.input_spec, engine.lut)
    return FixedTensor(fx, ACT_FRAC)


def infer_quant(model: Model, frames, mode=Mode.ULQ, qcfg: QuantConfig = QuantConfig(),
                engine: Engine = DEFAULT_ENGINE, quantize_activations: bool = True):
    """Full quantized forward pass. Returns ``(scores, QuantStats)``.

    P2QNN mode keeps every activation in 16-bit fixed point, so it equals ULQ
    mode with ``quantize_activations=False``.
    """
    mode = Mode(mode)
    if model.dtype != "logcode":
        raise TypeError("infer_quant needs log-quantized weights")
    quantize = mode is Mode.ULQ and quantize_activations
    net = model.net
    stats = QuantStats()
    front, lstm, head = net.stages()

    def run(i, x):
        layer = net.layers[i]
        try:
            return layer_forward_quant(layer, x, model.weights[i], model.biases[i], mode, qcfg, engine,
                                       stats.layer(layer.name), quantize_activations)
        except (ShapeError, InvalidInputError) as exc:
            raise type(exc)(f"layer {i}: {exc}") from None

    seq = []
    for frame in _frames_for(net, frames):
        x = ingest(frame, quantize, qcfg, engine)
        for i in front:
            x = run(i, x)
        seq.append(x)
    if lstm:
        if len(seq) == 1:
            seq = seq * net.time_steps
        for i in lstm:
            layer = net.layers[i]
            seq = lstm_forward_quant(layer, seq, model.weights[i], model.biases[i], mode, qcfg, engine,
                                     stats.layer(layer.name), quantize_activations)
    x = seq[-1]
    for i in head:
        x = run(i, x)
    if net.layers[-1].kind is not LayerKind.SOFTMAX:
        x = softmax(x.values().reshape(-1))
    return np.asarray(x), stats
