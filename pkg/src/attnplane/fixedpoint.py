"""Signed fixed-point number system with checked and saturating arithmetic.

All dataplane state in the simulator is held as scaled two's-complement
integers: a value x is stored as raw = round(x * 2**fraction_bits), and the
worst-case error of a single rounding is eta_q = 2**-(fraction_bits+1).
Rounding is round-half-to-even so accumulated rounding bias is zero-mean.

Scalar operations go through exact rational arithmetic (``fractions``), so
ties round correctly for any input.  Array operations use numpy int64 raws;
multiplying a float64 by a power of two is exact and ``np.rint`` rounds
half-to-even, so the two paths produce bit-identical raws (guarded to
formats narrow enough for float64 to hold every raw exactly).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

CHECKED = "checked"
SATURATING = "saturating"
POLICIES = (CHECKED, SATURATING)

# widest format whose raws are exact in float64 (array fast path)
_ARRAY_SAFE_BITS = 52

_FMT_RE = re.compile(r"^q(\d+)\.(\d+)$")


class OutOfRangeError(ValueError):
    """Input magnitude exceeds the representable range (a config error, not data)."""


class FixedPointOverflowError(OverflowError):
    """Checked add would leave the representable range.

    Carries the raw value the add would have produced, and the flat index of
    the violating register coordinate for array operations.
    """

    def __init__(self, raw, fmt, coord=None):
        self.raw = raw
        self.fmt = fmt
        self.coord = coord
        where = "" if coord is None else f" at coordinate {coord}"
        super().__init__(
            f"raw value {raw} outside [{fmt.min_raw}, {fmt.max_raw}] for {fmt}{where}"
        )


@dataclass(frozen=True)
class FixedPointFormat:
    """b-bit signed two's-complement with a binary point at fraction_bits."""

    total_bits: int
    fraction_bits: int

    def __post_init__(self):
        if not (2 <= self.total_bits <= 64):
            raise ValueError(f"total_bits must be in [2, 64], got {self.total_bits}")
        if not (0 <= self.fraction_bits < self.total_bits):
            raise ValueError(
                f"fraction_bits must be in [0, total_bits), got {self.fraction_bits}"
            )

    @property
    def scale(self) -> int:
        return 1 << self.fraction_bits

    @property
    def max_raw(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def min_raw(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def max_value(self) -> float:
        return self.max_raw / self.scale

    @property
    def min_value(self) -> float:
        return self.min_raw / self.scale

    @property
    def eta_q(self) -> float:
        """Worst-case error of one rounding: half of one LSB."""
        return 2.0 ** (-self.fraction_bits - 1)

    def eta_q_exact(self) -> Fraction:
        return Fraction(1, 2 << self.fraction_bits)

    @classmethod
    def from_string(cls, s: str) -> "FixedPointFormat":
        m = _FMT_RE.match(s.strip())
        if not m:
            raise ValueError(f"bad format spec {s!r}, expected e.g. 'q16.8'")
        return cls(int(m.group(1)), int(m.group(2)))

    def __str__(self) -> str:
        return f"q{self.total_bits}.{self.fraction_bits}"


@dataclass(frozen=True)
class FixedPointValue:
    raw: int
    fmt: FixedPointFormat

    def __post_init__(self):
        if not (self.fmt.min_raw <= self.raw <= self.fmt.max_raw):
            raise OutOfRangeError(
                f"raw {self.raw} outside [{self.fmt.min_raw}, {self.fmt.max_raw}] for {self.fmt}"
            )

    @property
    def value(self) -> float:
        return self.raw / self.fmt.scale

    def exact(self) -> Fraction:
        return Fraction(self.raw, self.fmt.scale)


def _round_half_even(x: Fraction) -> int:
    n, d = x.numerator, x.denominator
    q, r = divmod(n, d)
    twice = 2 * r
    if twice > d or (twice == d and q % 2 != 0):
        q += 1
    return q


def quantize(x, fmt: FixedPointFormat, policy: str = CHECKED) -> FixedPointValue:
    """Round a real to the nearest representable value (half-to-even).

    With the checked policy an out-of-range input raises OutOfRangeError;
    with the saturating policy it clamps to the range edge.
    """
    raw = _round_half_even(Fraction(x) * fmt.scale)
    if raw > fmt.max_raw or raw < fmt.min_raw:
        if policy == SATURATING:
            raw = min(max(raw, fmt.min_raw), fmt.max_raw)
        else:
            raise OutOfRangeError(f"{x!r} is not representable in {fmt}")
    return FixedPointValue(raw, fmt)


def checked_add(a: FixedPointValue, b: FixedPointValue) -> FixedPointValue:
    """Exact integer add; raises FixedPointOverflowError instead of wrapping."""
    if a.fmt != b.fmt:
        raise ValueError(f"format mismatch: {a.fmt} vs {b.fmt}")
    raw = a.raw + b.raw
    if raw > a.fmt.max_raw or raw < a.fmt.min_raw:
        raise FixedPointOverflowError(raw, a.fmt)
    return FixedPointValue(raw, a.fmt)


def saturating_add(a: FixedPointValue, b: FixedPointValue) -> FixedPointValue:
    if a.fmt != b.fmt:
        raise ValueError(f"format mismatch: {a.fmt} vs {b.fmt}")
    raw = min(max(a.raw + b.raw, a.fmt.min_raw), a.fmt.max_raw)
    return FixedPointValue(raw, a.fmt)


def add(a: FixedPointValue, b: FixedPointValue, policy: str = CHECKED) -> FixedPointValue:
    if policy == SATURATING:
        return saturating_add(a, b)
    return checked_add(a, b)


def overflow_horizon(fmt: FixedPointFormat, B_phi, R_v, eta_q, m: int, d_v: int) -> int:
    """Largest step count T with T*B_phi*R_v + T*eta_q*m*d_v <= 2**(b-1) - 1.

    Returns 0 when even a single step exceeds the range.  Evaluated in exact
    rational arithmetic so the floor is never off by one.
    """
    if B_phi <= 0 or R_v <= 0:
        raise ValueError("B_phi and R_v must be positive")
    if eta_q < 0:
        raise ValueError("eta_q must be non-negative")
    per_step = Fraction(B_phi) * Fraction(R_v) + Fraction(eta_q) * m * d_v
    horizon = Fraction(fmt.max_raw) / per_step
    return max(int(horizon), 0)


# ---------------------------------------------------------------------------
# array layer: int64 raws, used by the attention accumulators


def _check_array_fmt(fmt: FixedPointFormat):
    if fmt.total_bits > _ARRAY_SAFE_BITS:
        raise ValueError(
            f"array ops support formats up to {_ARRAY_SAFE_BITS} bits, got {fmt}"
        )


def quantize_array(x: np.ndarray, fmt: FixedPointFormat, policy: str = CHECKED) -> np.ndarray:
    """Vectorized quantize; returns int64 raws, bit-identical to the scalar path."""
    _check_array_fmt(fmt)
    scaled = np.asarray(x, dtype=np.float64) * float(fmt.scale)  # exact: power of two
    raw = np.rint(scaled)
    hi, lo = float(fmt.max_raw), float(fmt.min_raw)
    if policy == SATURATING:
        raw = np.clip(raw, lo, hi)
    else:
        bad = (raw > hi) | (raw < lo)
        if bad.any():
            idx = int(np.argmax(bad))
            raise OutOfRangeError(
                f"value {np.asarray(x).ravel()[idx]!r} not representable in {fmt} "
                f"(flat index {idx})"
            )
    return raw.astype(np.int64)


def add_array(a_raw: np.ndarray, b_raw: np.ndarray, fmt: FixedPointFormat,
              policy: str = CHECKED) -> np.ndarray:
    """Element-wise raw add under the overflow policy.

    int64 holds any sum of two in-range raws for formats up to 63 bits, so the
    range check happens after an exact add.
    """
    out = a_raw + b_raw
    if policy == SATURATING:
        return np.clip(out, fmt.min_raw, fmt.max_raw)
    bad = (out > fmt.max_raw) | (out < fmt.min_raw)
    if bad.any():
        coord = int(np.argmax(bad.ravel()))
        raise FixedPointOverflowError(int(out.ravel()[coord]), fmt, coord=coord)
    return out


def dequantize_array(raw: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    return raw.astype(np.float64) / float(fmt.scale)
