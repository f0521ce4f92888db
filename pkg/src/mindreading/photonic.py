"""Logic-level model of the micro-disk compute primitives.

Light is binary: a waveguide either carries a carrier wave or it does not.
Micro-disks modulate (pass/block) light, splitters duplicate it, and the two
tuned combiners behave as XOR and OR gates. Nothing here models phase,
insertion loss or wavelength; the devices are used strictly as Boolean gates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class GateError(ValueError):
    pass


# -- optical building blocks --------------------------------------------------

def split(light: bool) -> tuple[bool, bool]:
    """Y-splitter: both halves carry light iff the input does."""
    return light, light


def modulate(light: bool, drive: int) -> bool:
    """Micro-disk modulator driven by an electrical bit; passes light iff drive is 1."""
    return light and bool(drive)


def combine_xor(a: bool, b: bool) -> bool:
    # destructive interference when both arms are lit
    return a != b


def combine_or(a: bool, b: bool) -> bool:
    return a or b


def detect(light: bool) -> int:
    return int(light)


def _eo_full_adder(a: int, b: int, c_in: int) -> tuple[int, int, int, int]:
    # CMOS precompute, zero latency inside the cycle
    p = a ^ b
    g = a & b
    carry_sum, carry_carry = split(bool(c_in))  # only this carrier encodes the incoming carry
    bias_sum, bias_carry = split(True)           # always-on carrier
    s = combine_xor(carry_sum, modulate(bias_sum, p))
    c = combine_or(modulate(carry_carry, p), modulate(bias_carry, g))
    return p, g, detect(s), detect(c)


@dataclass(frozen=True)
class FullAdderState:
    a: int
    b: int
    c_in: int
    p: int
    g: int
    s: int
    c_out: int

    @classmethod
    def evaluate(cls, a: int, b: int, c_in: int) -> "FullAdderState":
        for name, bit in (("a", a), ("b", b), ("c_in", c_in)):
            if bit not in (0, 1):
                raise GateError(f"{name} must be a bit, got {bit!r}")
        return cls(a, b, c_in, *_eo_full_adder(a, b, c_in))


def full_adder_step(a: int, b: int, c_in: int) -> tuple[int, int]:
    st = FullAdderState.evaluate(a, b, c_in)
    return st.s, st.c_out


class AddResult(NamedTuple):
    sum: int
    carry_out: int
    latency: int


def ripple_add(a: int, b: int, n: int = 16) -> AddResult:
    """n-bit ripple-carry addition built from :func:`full_adder_step`.

    The whole chain settles within one cycle of the (derated) adder clock.
    """
    if n not in (4, 16):
        raise GateError(f"ripple adder width must be 4 or 16, got {n}")
    mask = (1 << n) - 1
    if not (0 <= a <= mask and 0 <= b <= mask):
        raise GateError(f"operands must be {n}-bit unsigned words")
    carry = 0
    out = 0
    for i in range(n):
        _, _, s, carry = _eo_full_adder((a >> i) & 1, (b >> i) & 1, carry)
        out |= s << i
    return AddResult(out, carry, 1)


@dataclass
class CrossbarState:
    """n x n crossing-switch matrix; ``cse[i, j]`` ON routes input bit i to output bit j."""

    size: int
    cse: np.ndarray = None

    def __post_init__(self):
        if self.cse is None:
            self.cse = np.zeros((self.size, self.size), dtype=bool)
        self.cse = np.asarray(self.cse, dtype=bool)
        if self.cse.shape != (self.size, self.size):
            raise GateError(f"CSE matrix must be {self.size}x{self.size}")

    def is_valid(self) -> bool:
        # at most one ON switch per input row, never two rows into one column
        return bool((self.cse.sum(axis=1) <= 1).all() and (self.cse.sum(axis=0) <= 1).all())

    def route(self, word: int) -> int:
        out = 0
        for j in range(self.size):
            lit = False
            for i in range(self.size):
                lit = combine_or(lit, modulate(bool((word >> i) & 1), self.cse[i, j]))
            out |= detect(lit) << j  # dark photodetector reads 0
        return out


def configure_shift(n: int, amount: int, direction: str) -> CrossbarState:
    if direction not in ("left", "right"):
        raise GateError(f"direction must be 'left' or 'right', got {direction!r}")
    if not 0 <= amount < n:
        raise GateError(f"shift amount {amount} out of range [0, {n})")
    xb = CrossbarState(n)
    step = amount if direction == "left" else -amount
    for i in range(n):
        j = i + step
        if 0 <= j < n:
            xb.cse[i, j] = True
    return xb


def crossbar_shift(word: int, amount: int, direction: str, n: int = 4) -> int:
    """Logical shift with zero fill through a configured CSE crossbar."""
    if not 0 <= word < (1 << n):
        raise GateError(f"word must be an unsigned {n}-bit value")
    xb = configure_shift(n, amount, direction)
    assert xb.is_valid()
    return xb.route(word)


@dataclass
class PseArray:
    width: int
    md_on: np.ndarray = None

    def __post_init__(self):
        if self.md_on is None:
            self.md_on = np.zeros(self.width, dtype=bool)

    def is_valid(self) -> bool:
        return int(self.md_on.sum()) <= 1

    def configure(self, b: int) -> None:
        """Turn on the disk for position ``b``; below range stays dark, above clamps."""
        self.md_on[:] = False
        if b >= 0:
            self.md_on[min(b, self.width - 1)] = True

    def output(self) -> int:
        out = 0
        for i in range(self.width):
            out |= detect(modulate(True, self.md_on[i])) << i
        return out


def bshift_pse(b: int, width: int = 4) -> int:
    """``bitshift(1, b)`` as a one-hot word from a parallel-switch array."""
    pse = PseArray(width)
    pse.configure(b)
    assert pse.is_valid()
    return pse.output()


def selftest(n_random: int = 100_000, seed: int = 0) -> dict[str, tuple[int, int]]:
    """Run the exhaustive / randomized primitive sweeps; returns ``{name: (cases, failures)}``."""
    results = {}

    fails = 0
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                s, co = full_adder_step(a, b, c)
                fails += (s, co) != ((a + b + c) & 1, (a + b + c) >> 1)
    results["full_adder"] = (8, fails)

    fails = 0
    for a in range(16):
        for b in range(16):
            r = ripple_add(a, b, 4)
            fails += (r.sum, r.carry_out) != ((a + b) & 15, (a + b) >> 4)
    results["ripple_add_4"] = (256, fails)

    rng = np.random.default_rng(seed)
    pairs = rng.integers(0, 1 << 16, size=(n_random, 2))
    fails = 0
    for a, b in pairs.tolist():
        r = ripple_add(a, b, 16)
        fails += (r.sum, r.carry_out) != ((a + b) & 0xFFFF, (a + b) >> 16)
    results["ripple_add_16"] = (n_random, fails)

    fails = cases = 0
    for w in range(16):
        for amt in range(4):
            for d in ("left", "right"):
                cases += 1
                want = (w << amt) & 15 if d == "left" else w >> amt
                fails += crossbar_shift(w, amt, d, 4) != want
    results["crossbar_shift_4"] = (cases, fails)

    fails = 0
    for b in range(4):
        out = bshift_pse(b, 4)
        fails += out != (1 << b) or bin(out).count("1") != 1
    results["bshift_pse_4"] = (4, fails)
    return results
