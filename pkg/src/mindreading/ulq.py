"""Universal logarithmic quantization (ULQ).

Every quantizer maps a real value to ``0`` or ``±2**e`` where the integer
exponent ``e`` is ``round(log2|x|)`` clipped into a small window whose
position depends on the activation kind:

========  =====================
kind      exponent window
========  =====================
Tanh      ``[alpha - N, alpha]``
Sigmoid   ``[beta - N, beta]``
ReLU      ``[theta, theta + N]``
Weight    ``[alpha - N, alpha]``
========  =====================

These are the formula-path (reference) quantizers. The hardware path in
:mod:`mindreading.logmac` must agree with them bit for bit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np


class InvalidRangeError(ValueError):
    """Raised when a clip window is empty (min > max)."""


class InvalidInputError(ValueError):
    """Raised for inputs a quantizer cannot represent (NaN, inf, wrong sign)."""


class QuantKind(str, enum.Enum):
    TANH = "tanh"
    SIGMOID = "sigmoid"
    RELU = "relu"
    WEIGHT = "weight"


DEFAULT_OFFSETS = {
    QuantKind.TANH: 0,
    QuantKind.SIGMOID: 1,
    QuantKind.RELU: 0,
    QuantKind.WEIGHT: 0,
}

# smallest double >= 2**-0.5; the tie point is irrational so no input hits it
_INV_SQRT2 = math.sqrt(0.5)


@dataclass(frozen=True)
class LogCode:
    """A signed power of two, or zero."""

    is_zero: bool
    sign: int = 1
    exponent: int = 0

    def __post_init__(self):
        if self.is_zero:
            object.__setattr__(self, "sign", 1)
            object.__setattr__(self, "exponent", 0)
        elif self.sign not in (1, -1):
            raise ValueError(f"sign must be +1 or -1, got {self.sign}")
        object.__setattr__(self, "exponent", int(self.exponent))

    @classmethod
    def zero(cls) -> "LogCode":
        return cls(True)

    @classmethod
    def of(cls, sign: int, exponent: int) -> "LogCode":
        return cls(False, sign, exponent)

    @property
    def value(self) -> float:
        return dequantize(self)

    def __neg__(self) -> "LogCode":
        if self.is_zero:
            return self
        return LogCode(False, -self.sign, self.exponent)

    def __repr__(self):
        if self.is_zero:
            return "LogCode(0)"
        return f"LogCode({'+' if self.sign > 0 else '-'}, {self.exponent})"


@dataclass(frozen=True)
class QuantSpec:
    """Quantizer configuration: bit width, activation kind and window offset."""

    bits: int
    kind: QuantKind
    offset: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", QuantKind(self.kind))
        if not isinstance(self.bits, (int, np.integer)) or self.bits < 1:
            raise ValueError(f"bits must be an integer >= 1, got {self.bits!r}")
        if self.offset is None:
            object.__setattr__(self, "offset", DEFAULT_OFFSETS[self.kind])
        object.__setattr__(self, "offset", int(self.offset))

    @property
    def window(self) -> tuple[int, int]:
        n, off = self.bits, self.offset
        if self.kind is QuantKind.RELU:
            return off, off + n
        return off - n, off

    @classmethod
    def tanh(cls, bits: int = 4, alpha: int = 0) -> "QuantSpec":
        return cls(bits, QuantKind.TANH, alpha)

    @classmethod
    def sigmoid(cls, bits: int = 4, beta: int = 1) -> "QuantSpec":
        return cls(bits, QuantKind.SIGMOID, beta)

    @classmethod
    def relu(cls, bits: int = 4, theta: int = 0) -> "QuantSpec":
        return cls(bits, QuantKind.RELU, theta)

    @classmethod
    def weight(cls, bits: int = 4, alpha: int = 0) -> "QuantSpec":
        return cls(bits, QuantKind.WEIGHT, alpha)


def clip(a, lo, hi):
    """Saturate ``a`` into ``[lo, hi]`` (inclusive)."""
    if lo > hi:
        raise InvalidRangeError(f"empty clip range [{lo}, {hi}]")
    if a < lo:
        return lo
    if a > hi:
        return hi
    return a


def round_nearest(a: float) -> int:
    """Round to the nearest integer, ties away from zero."""
    if not math.isfinite(a):
        raise InvalidInputError(f"cannot round non-finite value {a!r}")
    fl = math.floor(a)
    frac = a - fl  # exact for doubles
    if frac > 0.5 or (frac == 0.5 and a > 0):
        return int(fl) + 1
    return int(fl)


def log2_round(x: float) -> int:
    """``round(log2(x))`` for ``x > 0``, computed exactly from the binary exponent.

    With ``x = m * 2**e`` and ``m`` in ``[0.5, 1)``, ``log2(m) + 0.5 >= 0``
    iff ``m >= 2**-0.5``. No transcendental rounding error is involved.
    """
    m, e = math.frexp(x)
    return e if m >= _INV_SQRT2 else e - 1


def _check_finite(x: float) -> float:
    x = float(x)
    if not math.isfinite(x):
        raise InvalidInputError(f"non-finite input {x!r}")
    return x


def _signed_code(x: float, spec: QuantSpec) -> LogCode:
    if x == 0.0:
        return LogCode.zero()
    lo, hi = spec.window
    return LogCode.of(1 if x > 0 else -1, clip(log2_round(abs(x)), lo, hi))


def quantize_tanh(x: float, spec: QuantSpec) -> LogCode:
    if spec.kind is not QuantKind.TANH:
        raise ValueError(f"expected a tanh spec, got {spec.kind.value}")
    return _signed_code(_check_finite(x), spec)


def quantize_weight(w: float, spec: QuantSpec) -> LogCode:
    if spec.kind is not QuantKind.WEIGHT:
        raise ValueError(f"expected a weight spec, got {spec.kind.value}")
    return _signed_code(_check_finite(w), spec)


def _positive_code(x: float, spec: QuantSpec) -> LogCode:
    x = _check_finite(x)
    if x < 0:
        raise InvalidInputError(f"{spec.kind.value} quantizer expects x >= 0, got {x}")
    return _signed_code(x, spec)


def quantize_sigmoid(x: float, spec: QuantSpec) -> LogCode:
    if spec.kind is not QuantKind.SIGMOID:
        raise ValueError(f"expected a sigmoid spec, got {spec.kind.value}")
    return _positive_code(x, spec)


def quantize_relu(x: float, spec: QuantSpec) -> LogCode:
    if spec.kind is not QuantKind.RELU:
        raise ValueError(f"expected a relu spec, got {spec.kind.value}")
    return _positive_code(x, spec)


_QUANTIZERS = {
    QuantKind.TANH: quantize_tanh,
    QuantKind.SIGMOID: quantize_sigmoid,
    QuantKind.RELU: quantize_relu,
    QuantKind.WEIGHT: quantize_weight,
}


def quantize(x: float, spec: QuantSpec) -> LogCode:
    """Dispatch to the quantizer matching ``spec.kind``."""
    return _QUANTIZERS[spec.kind](x, spec)


def dequantize(c: LogCode) -> float:
    if c.is_zero:
        return 0.0
    return c.sign * math.ldexp(1.0, c.exponent)


@dataclass
class LogTensor:
    """A dense tensor of log codes, stored as parallel arrays in row-major order."""

    shape: tuple[int, ...]
    is_zero: np.ndarray
    sign: np.ndarray
    exponent: np.ndarray
    spec: QuantSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        size = int(np.prod(self.shape, dtype=np.int64))
        self.is_zero = np.asarray(self.is_zero, dtype=bool).reshape(-1)
        self.sign = np.asarray(self.sign, dtype=np.int8).reshape(-1)
        self.exponent = np.asarray(self.exponent, dtype=np.int16).reshape(-1)
        for name in ("is_zero", "sign", "exponent"):
            if getattr(self, name).size != size:
                raise ValueError(f"{name} has {getattr(self, name).size} entries, shape {self.shape} needs {size}")
        # normalized zero representation
        self.sign[self.is_zero] = 1
        self.exponent[self.is_zero] = 0

    def __len__(self):
        return self.is_zero.size

    def __iter__(self) -> Iterator[LogCode]:
        for z, s, e in zip(self.is_zero, self.sign, self.exponent):
            yield LogCode(bool(z), int(s), int(e))

    def __getitem__(self, i: int) -> LogCode:
        return LogCode(bool(self.is_zero[i]), int(self.sign[i]), int(self.exponent[i]))

    def __eq__(self, other):
        if not isinstance(other, LogTensor):
            return NotImplemented
        return (self.shape == other.shape
                and np.array_equal(self.is_zero, other.is_zero)
                and np.array_equal(self.sign, other.sign)
                and np.array_equal(self.exponent, other.exponent))

    @property
    def codes(self) -> list[LogCode]:
        return list(self)

    @classmethod
    def from_codes(cls, codes: Sequence[LogCode], shape: Iterable[int] | None = None,
                   spec: QuantSpec | None = None) -> "LogTensor":
        shape = (len(codes),) if shape is None else tuple(shape)
        return cls(shape,
                   [c.is_zero for c in codes],
                   [c.sign for c in codes],
                   [c.exponent for c in codes],
                   spec)

    @classmethod
    def zeros(cls, shape, spec: QuantSpec | None = None) -> "LogTensor":
        n = int(np.prod(shape, dtype=np.int64))
        return cls(shape, np.ones(n, bool), np.ones(n, np.int8), np.zeros(n, np.int16), spec)

    def values(self) -> np.ndarray:
        """Dequantized float64 array with the tensor's shape."""
        out = self.sign * np.ldexp(1.0, self.exponent.astype(np.int64))
        out[self.is_zero] = 0.0
        return out.reshape(self.shape)

    def reshape(self, *shape) -> "LogTensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        shape = self.is_zero.reshape(shape).shape  # resolves -1
        return LogTensor(shape, self.is_zero, self.sign, self.exponent, self.spec)


def log2_round_array(x: np.ndarray) -> np.ndarray:
    """Vectorized :func:`log2_round` for positive finite values."""
    m, e = np.frexp(x)
    return np.where(m >= _INV_SQRT2, e, e - 1).astype(np.int64)


def quantize_tensor(values, spec: QuantSpec) -> LogTensor:
    """Quantize every element of ``values`` with the kind-appropriate quantizer."""
    arr = np.asarray(values, dtype=np.float64)
    flat = arr.reshape(-1)
    bad = ~np.isfinite(flat)
    if spec.kind in (QuantKind.SIGMOID, QuantKind.RELU):
        bad |= flat < 0
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        idx = np.unravel_index(i, arr.shape) if arr.ndim else ()
        # re-raise through the scalar quantizer for a consistent message
        try:
            quantize(flat[i], spec)
        except InvalidInputError as exc:
            raise InvalidInputError(f"element {tuple(int(j) for j in idx)}: {exc}") from None
    lo, hi = spec.window
    zero = flat == 0.0
    mag = np.where(zero, 1.0, np.abs(flat))
    exp = np.clip(log2_round_array(mag), lo, hi)
    sign = np.where(flat < 0, -1, 1)
    return LogTensor(arr.shape, zero, sign, exp, spec)
