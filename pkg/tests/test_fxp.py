import numpy as np
import pytest

from cimsim.fxp import (
    AccTensor,
    FxpError,
    FxpFormat,
    FxpValue,
    QuantTensor,
    fxp_mul,
    quantize,
    requantize_32_to_8,
    rhe_div,
    rhe_shift_right,
)


def oracle_rhe_shift(value, shift):
    # independent round-half-even on the exact rational value / 2**shift
    if shift <= 0:
        return value << (-shift)
    from fractions import Fraction

    frac = Fraction(value, 1 << shift)
    floor = frac.numerator // frac.denominator
    rem = frac - floor
    if rem > Fraction(1, 2):
        return floor + 1
    if rem < Fraction(1, 2):
        return floor
    return floor + (floor & 1)


class TestQuantize:
    def test_all_zero_input_gets_scale_one(self):
        qt = quantize(np.zeros(3))
        assert np.array_equal(qt.codes, [0, 0, 0])
        assert qt.scale == 1.0

    def test_hand_checked_round_half_even(self):
        # 0.5 / (1/127) = 63.5 rounds to the even code 64
        qt = quantize(np.array([-1.0, 0.5, 1.0]))
        assert qt.scale == pytest.approx(1.0 / 127.0, rel=0, abs=0)
        assert np.array_equal(qt.codes, [-127, 64, 127])

    def test_property_sweep_error_within_half_step(self):
        rng = np.random.default_rng(7)
        x = rng.normal(0.0, 3.0, 10_000)
        qt = quantize(x)
        err = np.abs(x - qt.codes.astype(np.float64) * qt.scale)
        assert err.max() <= qt.scale / 2 + 1e-15

    def test_saturation_outside_range(self):
        qt = quantize(np.array([1.0, 10.0]), scale=1.0 / 127.0)
        assert qt.codes[1] == 127

    def test_four_bit_mode(self):
        qt = quantize(np.array([-1.0, 1.0]), bits=4)
        assert np.array_equal(qt.codes, [-7, 7])
        assert qt.scale == pytest.approx(1.0 / 7.0)

    def test_rejects_non_finite(self):
        with pytest.raises(FxpError):
            quantize(np.array([1.0, np.inf]))
        with pytest.raises(FxpError):
            quantize(np.array([np.nan]))

    def test_round_trip_codes_are_fixed_points(self):
        codes = np.arange(-128, 128, dtype=np.int8)
        for scale in (1.0, 0.013, 1 / 127):
            qt = QuantTensor(codes, scale)
            again = quantize(qt.dequantize(), scale=scale)
            assert np.array_equal(again.codes, codes)


class TestRequantize:
    def test_zero_maps_to_zero(self):
        acc = AccTensor(np.zeros(4, dtype=np.int64), 0.5)
        assert np.all(requantize_32_to_8(acc, 0.1).codes == 0)

    def test_direct_arithmetic(self):
        acc = AccTensor(np.array([10_000], dtype=np.int64), 0.001)
        out = requantize_32_to_8(acc, 0.1)
        assert out.codes[0] == 100
        assert out.scale == 0.1

    def test_saturation_bound(self):
        acc = AccTensor(np.array([10**6], dtype=np.int64), 1.0)
        assert requantize_32_to_8(acc, 1.0).codes[0] == 127

    def test_monotone_nondecreasing(self):
        values = np.arange(-50_000, 50_000, 997, dtype=np.int64)
        codes = requantize_32_to_8(AccTensor(values, 0.0007), 0.09).codes
        assert np.all(np.diff(codes.astype(np.int32)) >= 0)

    def test_determinism(self):
        rng = np.random.default_rng(3)
        values = rng.integers(-(2**31), 2**31, 512)
        a = requantize_32_to_8(AccTensor(values, 1e-6), 1e-4).codes
        b = requantize_32_to_8(AccTensor(values.copy(), 1e-6), 1e-4).codes
        assert np.array_equal(a, b)


class TestFxpMul:
    def test_identity(self):
        q16 = FxpFormat(0, 16)
        one = FxpValue(1 << 16, FxpFormat(1, 16))
        x = FxpValue(12_345, q16)
        assert fxp_mul(one, x, q16).mantissa == 12_345

    def test_exact_representable_product(self):
        q16 = FxpFormat(0, 16)
        half = FxpValue(1 << 15, q16)
        out = fxp_mul(half, half, q16)
        assert out.value == 0.25

    def test_exhaustive_8x8_sweep_matches_wide_integer_oracle(self):
        fmt_in = FxpFormat(3, 4)  # 8-bit signed operands
        fmt_out = FxpFormat(3, 4)
        for a in range(-128, 128):
            for b in range(-128, 128):
                got = fxp_mul(FxpValue(a, fmt_in), FxpValue(b, fmt_in), fmt_out)
                want = oracle_rhe_shift(a * b, 4)
                want = max(fmt_out.min_mantissa, min(fmt_out.max_mantissa, want))
                assert got.mantissa == want, (a, b)

    def test_rhe_helpers_match_fraction_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(2000):
            v = int(rng.integers(-(2**40), 2**40))
            s = int(rng.integers(1, 20))
            assert rhe_shift_right(v, s) == oracle_rhe_shift(v, s)
        for _ in range(2000):
            n = int(rng.integers(0, 2**40))
            d = int(rng.integers(1, 10_000))
            from fractions import Fraction

            frac = Fraction(n, d)
            floor = frac.numerator // frac.denominator
            rem = frac - floor
            if rem > Fraction(1, 2):
                want = floor + 1
            elif rem < Fraction(1, 2):
                want = floor
            else:
                want = floor + (floor & 1)
            assert rhe_div(n, d) == want


class TestTypes:
    def test_acc_tensor_rejects_32bit_overflow(self):
        with pytest.raises(FxpError):
            AccTensor(np.array([2**31], dtype=np.int64), 1.0)

    def test_quant_tensor_rejects_bad_scale(self):
        with pytest.raises(FxpError):
            QuantTensor(np.zeros(2, dtype=np.int8), 0.0)

    def test_format_width_limit(self):
        with pytest.raises(FxpError):
            FxpFormat(40, 30)

    def test_codes_immutable(self):
        qt = QuantTensor(np.zeros(4, dtype=np.int8), 1.0)
        with pytest.raises(ValueError):
            qt.codes[0] = 1
