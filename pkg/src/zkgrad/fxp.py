"""Deterministic fixed-point arithmetic over scaled integers.

Every operation here has a twin realization as grid constraints (see
zkgrad.air), so witness generation and constraint checking must agree
bit for bit. All functions are pure and use exact integer arithmetic;
nothing in the hot path touches floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

# Scalar-field prime of the BN254 curve. Any prime > 2^(2N+2) is accepted.
BN254_SCALAR_PRIME = (
    21888242871839275222246405745257275088548364400416034343698204186575808495617
)

DEFAULT_RANGE_BITS = 20


class RangeOverflowError(ArithmeticError):
    """A value left the representable range [0, 2^N) or [0, 2^2N)."""


def _is_probable_prime(n: int) -> bool:
    """Miller-Rabin with fixed bases; plenty for config validation."""
    if n < 2:
        return False
    for p in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class FxpSpec:
    """Numeric format: scale factor, magnitude range, and ambient field.

    Real x is represented by the integer Round(x * scale_factor); all
    magnitudes stay below 2^range_bits and every gadget intermediate
    (including 2a+c and 2c*b) stays below the field modulus.
    """

    scale_factor: int = 1 << 13
    range_bits: int = DEFAULT_RANGE_BITS
    field_modulus: int = BN254_SCALAR_PRIME

    def __post_init__(self):
        if self.scale_factor < 1:
            raise ValueError("scale_factor must be positive")
        if self.scale_factor > (1 << self.range_bits):
            raise ValueError("scale_factor must not exceed 2^range_bits")
        if self.field_modulus <= (1 << (2 * self.range_bits + 2)):
            raise ValueError("field modulus too small: need 2^(2N+2) < q")
        if not _is_probable_prime(self.field_modulus):
            raise ValueError("field modulus must be prime")

    @property
    def sf(self) -> int:
        return self.scale_factor

    @property
    def range_bound(self) -> int:
        """Exclusive magnitude bound 2^N."""
        return 1 << self.range_bits

    @property
    def wide_bound(self) -> int:
        """Exclusive bound 2^2N for products and division operands."""
        return 1 << (2 * self.range_bits)

    def encode(self, raw: int) -> int:
        """Field encoding of a signed raw value (negatives map to q - |raw|)."""
        return raw % self.field_modulus

    def decode(self, element: int) -> int:
        """Signed raw value of a canonical field element of small magnitude."""
        q = self.field_modulus
        element %= q
        return element if element <= q // 2 else element - q


@dataclass(frozen=True)
class FxpScalar:
    """A signed scaled integer: represents raw / spec.scale_factor."""

    raw: int
    spec: FxpSpec

    def __post_init__(self):
        if abs(self.raw) >= self.spec.range_bound:
            raise RangeOverflowError(
                f"raw value {self.raw} outside [-2^{self.spec.range_bits}, 2^{self.spec.range_bits})"
            )

    def to_float(self) -> float:
        return self.raw / self.spec.scale_factor

    def to_field(self) -> int:
        return self.spec.encode(self.raw)


@dataclass(frozen=True)
class FxpTensor:
    """Row-major tensor of raw scaled integers sharing one spec."""

    shape: tuple[int, ...]
    data: tuple[int, ...]
    spec: FxpSpec = field(default_factory=FxpSpec)

    def __post_init__(self):
        n = 1
        for d in self.shape:
            n *= d
        if len(self.data) != n:
            raise ValueError(f"shape {self.shape} needs {n} elements, got {len(self.data)}")
        bound = self.spec.range_bound
        for v in self.data:
            if abs(v) >= bound:
                raise RangeOverflowError(f"element {v} outside range bound {bound}")

    @classmethod
    def from_reals(cls, shape: tuple[int, ...], values, spec: FxpSpec) -> "FxpTensor":
        return cls(shape, tuple(quantize(v, spec).raw for v in values), spec)

    def scalar(self, index: int) -> FxpScalar:
        return FxpScalar(self.data[index], self.spec)

    def to_floats(self) -> list[float]:
        sf = self.spec.scale_factor
        return [v / sf for v in self.data]


def quantize(x: float, spec: FxpSpec) -> FxpScalar:
    """Round x * SF to the nearest integer, ties away from zero."""
    scaled = abs(x) * spec.scale_factor
    if scaled >= spec.range_bound:
        raise RangeOverflowError(f"|{x}| * {spec.scale_factor} exceeds 2^{spec.range_bits}")
    raw = math.floor(scaled + 0.5)
    if x < 0:
        raw = -raw
    return FxpScalar(raw, spec)


def floor_div(a: int, c: int, spec: FxpSpec | None = None) -> int:
    """Truncating division floor(a / c) for 0 <= a, 1 <= c."""
    if c == 0:
        raise ZeroDivisionError("floor_div by zero")
    if a < 0 or c < 0:
        raise ValueError("floor_div operands must be nonnegative")
    if spec is not None:
        if a >= spec.wide_bound:
            raise RangeOverflowError(f"dividend {a} >= 2^(2N)")
        if c >= spec.range_bound:
            raise RangeOverflowError(f"divisor {c} >= 2^N")
    return a // c


def round_div(a: int, c: int, spec: FxpSpec | None = None) -> int:
    """Nearest-integer division of a by c.

    Nonnegative a rounds half up via floor((2a + c) / 2c); negative a
    divides the magnitude and reapplies the sign, so ties round away
    from zero on both sides.
    """
    if c == 0:
        raise ZeroDivisionError("round_div by zero")
    if c < 0:
        raise ValueError("round_div divisor must be positive")
    if a < 0:
        return -round_div(-a, c, spec)
    if spec is not None:
        if a >= spec.wide_bound:
            raise RangeOverflowError(f"dividend {a} >= 2^(2N)")
        if c >= spec.range_bound:
            raise RangeOverflowError(f"divisor {c} >= 2^N")
    return (2 * a + c) // (2 * c)


def mul_rescale(a: FxpScalar, b: FxpScalar) -> FxpScalar:
    """Product of two scaled values with a single rounded rescale."""
    if a.spec != b.spec:
        raise ValueError("operands must share a spec")
    spec = a.spec
    product = a.raw * b.raw
    if abs(product) >= spec.wide_bound:
        raise RangeOverflowError(f"raw product {product} >= 2^(2N)")
    raw = round_div(product, spec.scale_factor)
    if abs(raw) >= spec.range_bound:
        raise RangeOverflowError(f"rescaled product {raw} >= 2^N")
    return FxpScalar(raw, spec)
