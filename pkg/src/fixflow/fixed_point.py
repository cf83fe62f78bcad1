"""Exact two's-complement fixed-point arithmetic.

A value is an integer ``raw`` interpreted as ``raw * 2**-fraction_bits``
under a :class:`FixedPointSpec`. All operations are pure integer
arithmetic, so results are exact and platform independent:

* ``truncate`` rounds toward negative infinity (HLS ``AP_TRN``).
* ``round_half_up`` rounds to nearest, ties toward positive infinity
  (HLS ``AP_RND``).
* ``wrap`` reduces the raw integer modulo ``2**width`` and reinterprets
  it in two's complement; ``saturate`` clamps to the representable range.

``integer_bits`` may be negative or exceed ``width_bits`` (pure-fraction
and pure-integer formats), following the ``ap_fixed`` convention.
User-facing widths are capped at 64 bits; exact products of two such
values may be up to 128 bits wide and are represented with the same
machinery.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

TRUNCATE = "truncate"
ROUND_HALF_UP = "round_half_up"
WRAP = "wrap"
SATURATE = "saturate"

MAX_SPEC_WIDTH = 64
# Exact products of two <=64-bit operands.
_MAX_INTERNAL_WIDTH = 2 * MAX_SPEC_WIDTH


@dataclass(frozen=True)
class FixedPointSpec:
    """Shape of a fixed-point format: ``fixed<width, integer_bits>``."""

    width_bits: int
    integer_bits: int
    signed: bool = True
    rounding: str = TRUNCATE
    overflow: str = WRAP

    def __post_init__(self):
        if not 1 <= self.width_bits <= _MAX_INTERNAL_WIDTH:
            raise ValueError(f"width_bits must be in 1..{_MAX_INTERNAL_WIDTH}, got {self.width_bits}")
        if self.rounding not in (TRUNCATE, ROUND_HALF_UP):
            raise ValueError(f"unknown rounding mode {self.rounding!r}")
        if self.overflow not in (WRAP, SATURATE):
            raise ValueError(f"unknown overflow mode {self.overflow!r}")

    @property
    def fraction_bits(self) -> int:
        return self.width_bits - self.integer_bits

    @property
    def min_raw(self) -> int:
        return -(1 << (self.width_bits - 1)) if self.signed else 0

    @property
    def max_raw(self) -> int:
        if self.signed:
            return (1 << (self.width_bits - 1)) - 1
        return (1 << self.width_bits) - 1

    @property
    def min_value(self) -> Fraction:
        """Smallest representable real value."""
        return _raw_to_real(self.min_raw, self.fraction_bits)

    @property
    def max_value(self) -> Fraction:
        """Largest representable real value."""
        return _raw_to_real(self.max_raw, self.fraction_bits)

    @property
    def resolution(self) -> Fraction:
        """Spacing of the representable grid, ``2**-fraction_bits``."""
        return _raw_to_real(1, self.fraction_bits)

    @classmethod
    def from_string(cls, text: str) -> "FixedPointSpec":
        """Parse the precision grammar ``fixed<W,I[,u][,rnd][,sat]>``."""
        s = text.strip()
        if not (s.startswith("fixed<") and s.endswith(">")):
            raise ValueError(f"bad precision string {text!r}: expected fixed<W,I,...>")
        parts = [p.strip() for p in s[len("fixed<"):-1].split(",")]
        if len(parts) < 2:
            raise ValueError(f"bad precision string {text!r}: need width and integer bits")
        try:
            width = int(parts[0])
            integer = int(parts[1])
        except ValueError:
            raise ValueError(f"bad precision string {text!r}: W and I must be integers") from None
        signed, rounding, overflow = True, TRUNCATE, WRAP
        for flag in parts[2:]:
            if flag == "u":
                signed = False
            elif flag == "rnd":
                rounding = ROUND_HALF_UP
            elif flag == "sat":
                overflow = SATURATE
            else:
                raise ValueError(f"bad precision string {text!r}: unknown flag {flag!r}")
        if not 1 <= width <= MAX_SPEC_WIDTH:
            raise ValueError(f"bad precision string {text!r}: width must be 1..{MAX_SPEC_WIDTH}")
        return cls(width, integer, signed=signed, rounding=rounding, overflow=overflow)

    def to_string(self) -> str:
        flags = ""
        if not self.signed:
            flags += ",u"
        if self.rounding == ROUND_HALF_UP:
            flags += ",rnd"
        if self.overflow == SATURATE:
            flags += ",sat"
        return f"fixed<{self.width_bits},{self.integer_bits}{flags}>"

    def __str__(self) -> str:
        return self.to_string()


@dataclass(frozen=True)
class FixedPointValue:
    """An integer ``raw`` carrying its interpretation spec."""

    raw: int
    spec: FixedPointSpec

    def __post_init__(self):
        if not self.spec.min_raw <= self.raw <= self.spec.max_raw:
            raise ValueError(
                f"raw {self.raw} outside range of {self.spec}"
            )

    def to_fraction(self) -> Fraction:
        """Exact real value, ``raw * 2**-fraction_bits``."""
        return _raw_to_real(self.raw, self.spec.fraction_bits)

    def to_float(self) -> float:
        return float(self.to_fraction())

    def __str__(self) -> str:
        return f"{self.to_float()} ({self.raw} @ {self.spec})"


def _raw_to_real(raw: int, fraction_bits: int) -> Fraction:
    if fraction_bits >= 0:
        return Fraction(raw, 1 << fraction_bits)
    return Fraction(raw << (-fraction_bits))


def shift_round(raw: int, shift: int, rounding: str) -> int:
    """Scale ``raw`` by ``2**shift``, rounding per mode when shift < 0.

    Right shifts of negative ints floor in Python, which is exactly the
    truncate-toward-negative-infinity semantics.
    """
    if shift >= 0:
        return raw << shift
    if rounding == ROUND_HALF_UP:
        return (raw + (1 << (-shift - 1))) >> (-shift)
    return raw >> (-shift)


def apply_overflow(raw: int, spec: FixedPointSpec) -> int:
    """Reduce an unbounded raw integer into the representable raw range."""
    if spec.min_raw <= raw <= spec.max_raw:
        return raw
    if spec.overflow == SATURATE:
        return spec.max_raw if raw > spec.max_raw else spec.min_raw
    mask = (1 << spec.width_bits) - 1
    wrapped = raw & mask
    if spec.signed and wrapped > spec.max_raw:
        wrapped -= 1 << spec.width_bits
    return wrapped


def quantize_ratio(num: int, den: int, spec: FixedPointSpec) -> int:
    """Quantize the exact rational num/den (den a power of two > 0) to a raw."""
    # Target is round(num/den * 2**frac); fold the scale into the ratio.
    frac = spec.fraction_bits
    if frac >= 0:
        num <<= frac
    else:
        den <<= -frac
    if den == 1:
        scaled = num
    elif spec.rounding == ROUND_HALF_UP:
        scaled = (2 * num + den) // (2 * den)
    else:
        scaled = num // den
    return apply_overflow(scaled, spec)


def quantize(x, spec: FixedPointSpec) -> FixedPointValue:
    """Round a finite real number onto the spec's grid.

    Overflow is defined behavior (wrap or saturate), never an error.
    Accepts float, int, or Fraction; conversion is exact in all cases.
    """
    if isinstance(x, Fraction):
        num, den = x.numerator, x.denominator
        if den & (den - 1):
            raise ValueError("quantize expects a dyadic rational Fraction")
    elif isinstance(x, int):
        num, den = x, 1
    else:
        x = float(x)
        if x != x or x in (float("inf"), float("-inf")):
            raise ValueError(f"cannot quantize non-finite value {x}")
        num, den = x.as_integer_ratio()
    return FixedPointValue(quantize_ratio(num, den, spec), spec)


def cast_raw(raw: int, fraction_bits: int, spec: FixedPointSpec) -> int:
    """Re-express ``raw * 2**-fraction_bits`` under ``spec`` (raw in, raw out)."""
    scaled = shift_round(raw, spec.fraction_bits - fraction_bits, spec.rounding)
    return apply_overflow(scaled, spec)


def cast(v: FixedPointValue, spec: FixedPointSpec) -> FixedPointValue:
    """Convert a value to another spec; equals quantize(exact real of v)."""
    return FixedPointValue(cast_raw(v.raw, v.spec.fraction_bits, spec), spec)


def mul(a: FixedPointValue, b: FixedPointValue) -> FixedPointValue:
    """Exact product: width a.W+b.W, fraction a.frac+b.frac, no rounding."""
    spec = FixedPointSpec(
        a.spec.width_bits + b.spec.width_bits,
        a.spec.integer_bits + b.spec.integer_bits,
        signed=a.spec.signed or b.spec.signed,
        rounding=TRUNCATE,
        overflow=WRAP,
    )
    return FixedPointValue(a.raw * b.raw, spec)


def add(a: FixedPointValue, b: FixedPointValue, spec: FixedPointSpec) -> FixedPointValue:
    """Exact sum of a and b, then rounded/reduced once into ``spec``.

    When both operands already carry ``spec`` this is a plain raw addition
    with the spec's overflow handling, which is the accumulation step the
    kernels contract builds on.
    """
    fa, fb = a.spec.fraction_bits, b.spec.fraction_bits
    f = max(fa, fb)
    total = (a.raw << (f - fa)) + (b.raw << (f - fb))
    return FixedPointValue(cast_raw(total, f, spec), spec)


# Binary networks encode the arithmetical value -1 as bit 0 and +1 as bit 1,
# so the sign product reduces to XNOR on the encodings.

def encode_binary(value: int) -> int:
    if value == 1:
        return 1
    if value == -1:
        return 0
    raise ValueError(f"binary encoding defined only for +1/-1, got {value}")


def decode_binary(bit: int) -> int:
    if bit not in (0, 1):
        raise ValueError(f"binary bit must be 0 or 1, got {bit}")
    return 1 if bit else -1


def xnor_product(a: int, b: int) -> int:
    """Product of two {-1,+1} values, computed as XNOR on their encodings."""
    return decode_binary(~(encode_binary(a) ^ encode_binary(b)) & 1)
