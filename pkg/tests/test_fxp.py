"""Fixed-point arithmetic against exact-rational oracles."""

import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zkgrad.fxp import (
    FxpScalar,
    FxpSpec,
    FxpTensor,
    RangeOverflowError,
    floor_div,
    mul_rescale,
    quantize,
    round_div,
)


def nearest_ties_up(a: int, c: int) -> int:
    """Independent oracle: exact-rational nearest integer, ties upward."""
    q, r = divmod(a, c)
    return q + (1 if 2 * r >= c else 0)


SPEC1000 = FxpSpec(1000, 20)


class TestQuantize:
    def test_exact_multiple(self):
        assert quantize(0.5, SPEC1000).raw == 500

    def test_zero(self):
        assert quantize(0.0, FxpSpec(1 << 15, 20)).raw == 0

    def test_log_half(self):
        # high-precision oracle: ln(1/2) * 1000 = -693.147...
        assert quantize(math.log(0.5), SPEC1000).raw == -693

    def test_tie_rounds_away_from_zero(self):
        assert quantize(0.0005, SPEC1000).raw == 1
        assert quantize(-0.0005, SPEC1000).raw == -1

    def test_overflow(self):
        spec = FxpSpec(1 << 10, 12)
        with pytest.raises(RangeOverflowError):
            quantize(5.0, spec)

    @given(st.floats(min_value=-1000.0, max_value=1000.0, allow_nan=False))
    @settings(max_examples=300, derandomize=True)
    def test_error_bound(self, x):
        got = quantize(x, SPEC1000)
        assert abs(Fraction(got.raw, 1000) - Fraction(x)) <= Fraction(1, 2000)


class TestFloorDiv:
    @pytest.mark.parametrize("a,c,want", [(7, 2, 3), (4, 2, 2), (5, 3, 1), (0, 9, 0)])
    def test_examples(self, a, c, want):
        assert floor_div(a, c) == want

    def test_zero_divisor(self):
        with pytest.raises(ZeroDivisionError):
            floor_div(7, 0)

    def test_range_check(self):
        spec = FxpSpec(1 << 8, 10)
        with pytest.raises(RangeOverflowError):
            floor_div(1 << 20, 3, spec)


class TestRoundDiv:
    @pytest.mark.parametrize(
        "a,c,want",
        [
            (4, 2, 2),
            (7, 2, 4),          # 3.5 rounds away from zero
            (500000, 1500, 333),  # softmax toy operands
            (-7, 2, -4),        # sign symmetry
            (5, 3, 2),
            (1, 3, 0),
        ],
    )
    def test_examples(self, a, c, want):
        assert round_div(a, c) == want

    def test_zero_divisor(self):
        with pytest.raises(ZeroDivisionError):
            round_div(1, 0)

    def test_range_checks(self):
        spec = FxpSpec(1 << 8, 10)
        with pytest.raises(RangeOverflowError):
            round_div(1 << 21, 3, spec)
        with pytest.raises(RangeOverflowError):
            round_div(5, 1 << 11, spec)

    def test_exhaustive_small(self):
        for a in range(0, 1 << 10):
            for c in range(1, 1 << 5):
                assert round_div(a, c) == nearest_ties_up(a, c)

    @given(st.integers(min_value=0, max_value=(1 << 40) - 1), st.integers(min_value=1, max_value=(1 << 20) - 1))
    @settings(max_examples=500, derandomize=True)
    def test_matches_oracle(self, a, c):
        assert round_div(a, c) == nearest_ties_up(a, c)

    @given(st.integers(min_value=0, max_value=(1 << 40) - 1), st.integers(min_value=1, max_value=(1 << 20) - 1))
    @settings(max_examples=300, derandomize=True)
    def test_sign_symmetry(self, a, c):
        assert round_div(-a, c) == -round_div(a, c)


class TestMulRescale:
    @pytest.mark.parametrize(
        "a,b,want",
        [
            (500, 1000, 500),   # 0.5 * 1.0
            (500, 500, 250),    # 0.25
            (333, 333, 111),    # oracle rounds 110.889
        ],
    )
    def test_examples(self, a, b, want):
        got = mul_rescale(FxpScalar(a, SPEC1000), FxpScalar(b, SPEC1000))
        assert got.raw == want

    def test_overflow(self):
        spec = FxpSpec(1 << 4, 5)
        with pytest.raises(RangeOverflowError):
            mul_rescale(FxpScalar(31, spec), FxpScalar(31, spec))

    @given(
        st.integers(min_value=500, max_value=8000),
        st.integers(min_value=500, max_value=8000),
        st.booleans(),
        st.booleans(),
    )
    @settings(max_examples=400, derandomize=True)
    def test_relative_error_bound(self, ar, br, sa, sb):
        # magnitudes in [0.5, 8]: the documented bound provably holds there
        a = FxpScalar(-ar if sa else ar, SPEC1000)
        b = FxpScalar(-br if sb else br, SPEC1000)
        got = Fraction(mul_rescale(a, b).raw, 1000)
        exact = Fraction(a.raw, 1000) * Fraction(b.raw, 1000)
        rel = abs(got - exact) / abs(exact)
        m = max(abs(Fraction(a.raw, 1000)), abs(Fraction(b.raw, 1000)))
        assert rel <= Fraction(1, 1000) + 1 / (2 * 1000 * m)


class TestSpecAndTypes:
    def test_spec_invariants(self):
        with pytest.raises(ValueError):
            FxpSpec(0, 20)
        with pytest.raises(ValueError):
            FxpSpec(1 << 21, 20)  # SF > 2^N
        with pytest.raises(ValueError):
            FxpSpec(1 << 8, 130)  # 2^(2N+2) >= q

    def test_scalar_range(self):
        with pytest.raises(RangeOverflowError):
            FxpScalar(1 << 20, FxpSpec(1000, 20))

    def test_field_encoding(self):
        spec = SPEC1000
        s = FxpScalar(-3, spec)
        assert s.to_field() == spec.field_modulus - 3
        assert spec.decode(s.to_field()) == -3

    def test_tensor_shape(self):
        t = FxpTensor((2, 3), (1, 2, 3, 4, 5, 6), SPEC1000)
        assert t.scalar(4).raw == 5
        with pytest.raises(ValueError):
            FxpTensor((2, 2), (1, 2, 3), SPEC1000)

    def test_determinism(self):
        a = [round_div(12345678, 321) for _ in range(3)]
        assert len(set(a)) == 1
