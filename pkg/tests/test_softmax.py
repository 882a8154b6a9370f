import math
from fractions import Fraction

import numpy as np
import pytest

from cimsim.fxp import AccTensor, FxpFormat, Q8_24
from cimsim.softmax import (
    Flow,
    SoftmaxError,
    SplitSoftmaxState,
    build_exp_lut,
    build_recip_lut,
    load_exp_lut,
    load_recip_lut,
    naive_softmax_ref,
    normalize_terms,
    rescale_accumulator,
    safe_softmax_ref,
    save_exp_lut,
    save_recip_lut,
    split_softmax_probs,
    split_softmax_row,
)

LN2 = math.log(2.0)


def oracle_rhe(numer, denom):
    frac = Fraction(numer, denom)
    floor = frac.numerator // frac.denominator
    rem = frac - floor
    if rem > Fraction(1, 2):
        return floor + 1
    if rem < Fraction(1, 2):
        return floor
    return floor + (floor & 1)


class TestReferences:
    def test_naive_symmetry(self):
        assert np.allclose(naive_softmax_ref([0.0, 0.0]), [0.5, 0.5])

    def test_naive_closed_form(self):
        # e^0 = 1, e^{ln 3} = 3 -> [1/4, 3/4]
        out = naive_softmax_ref([0.0, math.log(3.0)])
        assert np.allclose(out, [0.25, 0.75], atol=1e-14)

    def test_naive_equals_safe_when_no_overflow(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            z = rng.normal(0, 5, rng.integers(1, 40))
            assert np.max(np.abs(naive_softmax_ref(z) - safe_softmax_ref(z))) < 1e-12

    def test_safe_handles_huge_inputs(self):
        out = safe_softmax_ref([1000.0, 1000.0])
        assert np.allclose(out, [0.5, 0.5])

    def test_safe_uniform_for_equal_inputs(self):
        assert np.allclose(safe_softmax_ref([3.3] * 4), [0.25] * 4)

    def test_safe_shift_invariance(self):
        rng = np.random.default_rng(6)
        z = rng.normal(0, 3, 17)
        for c in (-100.0, 0.5, 9e3):
            assert np.max(np.abs(safe_softmax_ref(z) - safe_softmax_ref(z + c))) < 1e-12

    def test_rejects_empty_and_nonfinite(self):
        with pytest.raises(SoftmaxError):
            safe_softmax_ref([])
        with pytest.raises(SoftmaxError):
            naive_softmax_ref([np.nan])


class TestExpLut:
    def test_exact_top_entry_is_one(self):
        lut = build_exp_lut(0.3, "exact")
        assert lut.term(127) == 1.0

    def test_exact_half_at_one_octave(self):
        lut = build_exp_lut(LN2, "exact")
        assert lut.term(126) == pytest.approx(0.5, abs=1e-15)

    def test_fixed_top_entry_pinned_to_max_code(self):
        lut = build_exp_lut(0.197, "fixed", 7)
        assert lut.term(127) == 127
        assert lut.max_code == 127

    def test_monotone_nondecreasing(self):
        for mode in ("exact", "fixed"):
            lut = build_exp_lut(0.11, mode)
            assert np.all(np.diff(np.asarray(lut.entries, dtype=np.float64)) >= 0)

    def test_entries_in_unit_interval(self):
        lut = build_exp_lut(0.05, "exact")
        assert np.all(lut.entries > 0) and np.all(lut.entries <= 1.0)

    def test_degenerate_table_warns(self):
        with pytest.warns(RuntimeWarning):
            build_exp_lut(6.0, "fixed")  # e^-6 rounds every sub-max entry to 0

    def test_lower_z_quant_max_clips_at_one(self):
        lut = build_exp_lut(0.5, "exact", z_quant_max=0)
        assert lut.term(100) == 1.0


class TestRecipLut:
    def test_entry_zero_is_one(self):
        for mode in ("exact", "fixed"):
            lut = build_recip_lut(8, mode)
            val = lut.entry(0) if mode == "exact" else lut.entry(0) / 2.0**15
            assert val == 1.0

    def test_midpoint_entry_two_thirds(self):
        lut = build_recip_lut(8, "exact")
        assert lut.entry(128) == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_floor_indexed_relative_error_within_2_to_minus_k(self):
        for k in (4, 8, 10):
            lut = build_recip_lut(k, "exact")
            m = np.linspace(1.0, 2.0, 20_001, endpoint=False)
            idx = np.minimum(((m - 1.0) * (1 << k)).astype(np.int64), (1 << k) - 1)
            approx = np.asarray(lut.entries)[idx]
            rel = np.abs(approx - 1.0 / m) * m
            assert rel.max() <= 2.0**-k + 1e-12

    def test_monotone_nonincreasing(self):
        lut = build_recip_lut(8, "fixed")
        assert np.all(np.diff(lut.entries) <= 0)

    def test_index_bits_validated(self):
        with pytest.raises(SoftmaxError):
            build_recip_lut(3)


class TestSplitPipeline:
    def test_push_max_token_adds_exact_one(self):
        lut = build_exp_lut(0.1, "fixed")
        state = SplitSoftmaxState(lut)
        term = state.push(127)
        assert term == 127
        assert state.denominator_value == 1.0

    def test_push_underflows_to_zero_code(self):
        lut = build_exp_lut(LN2, "fixed")
        state = SplitSoftmaxState(lut)
        assert state.push(-128) == 0  # e^(-255 ln 2) ~ 0

    def test_two_max_tokens_give_half_each(self):
        lut = build_exp_lut(0.2, "fixed")
        recip = build_recip_lut(8, "fixed")
        probs = split_softmax_probs(np.array([127, 127], dtype=np.int8), lut, recip)
        vals = probs.astype(np.float64) / 127.0
        assert np.all(probs == probs[0])
        assert np.max(np.abs(vals - 0.5)) <= 1.0 / 127.0

    def test_single_max_token_normalizer_exactly_one(self):
        lut = build_exp_lut(0.3, "fixed")
        recip = build_recip_lut(8, "fixed")
        state = SplitSoftmaxState(lut)
        state.push(127)
        nz = state.finalize(recip)
        assert nz.value == 1.0
        assert normalize_terms(nz, np.array([127]))[0] == 127

    def test_four_max_tokens_normalization_arithmetic(self):
        # D = 4.0 -> mantissa 1.0, exponent 2, M = 0.25 exactly
        lut = build_exp_lut(0.15, "fixed")
        recip = build_recip_lut(8, "fixed")
        state = SplitSoftmaxState(lut)
        for _ in range(4):
            state.push(127)
        nz = state.finalize(recip)
        assert nz.exponent == 2
        assert nz.value == 0.25

    def test_uniform_rows_quantize_to_rounded_reciprocal(self):
        lut = build_exp_lut(0.08, "fixed")
        recip = build_recip_lut(8, "fixed")
        for n in list(range(1, 41)) + [63, 64, 100, 127, 128]:
            probs = split_softmax_probs(
                np.full(n, 127, dtype=np.int8), lut, recip)
            want = oracle_rhe(127, n)
            assert np.all(probs == want), n

    def test_underflow_fallback_uniform_with_diagnostic(self):
        lut = build_exp_lut(LN2, "fixed")
        recip = build_recip_lut(8, "fixed")
        state = SplitSoftmaxState(lut)
        for _ in range(3):
            state.push(-128)
        nz = state.finalize(recip)
        assert nz.fallback
        assert state.diagnostics["underflow_fallbacks"] == 1
        probs = normalize_terms(nz, np.zeros(3, dtype=np.int64))
        assert np.all(probs == oracle_rhe(127, 3))

    def test_push_after_finalize_rejected(self):
        lut = build_exp_lut(0.1, "fixed")
        recip = build_recip_lut(8, "fixed")
        state = SplitSoftmaxState(lut)
        state.push(10)
        state.finalize(recip)
        with pytest.raises(SoftmaxError):
            state.push(5)

    def test_finalize_requires_a_token(self):
        state = SplitSoftmaxState(build_exp_lut(0.1, "fixed"))
        with pytest.raises(SoftmaxError):
            state.finalize(build_recip_lut(8, "fixed"))

    def test_denominator_saturates_with_diagnostic(self):
        lut = build_exp_lut(0.01, "fixed")
        recip = build_recip_lut(8, "fixed")
        state = SplitSoftmaxState(lut)
        for _ in range(300):  # 300 units exceed the Q8.24 integer range
            state.push(127)
        assert state.diagnostics["denominator_saturations"] > 0
        assert state.denominator_value <= 256.0
        state.finalize(recip)


class TestInvariantsAndEquivalences:
    def test_exact_mode_matches_safe_softmax_ref(self):
        rng = np.random.default_rng(2)
        recip = build_recip_lut(8, "exact")
        for scale in (0.01, 0.1, LN2):
            lut = build_exp_lut(scale, "exact")
            for _ in range(40):
                n = int(rng.integers(1, 1025))
                codes = rng.integers(-128, 128, n).astype(np.int8)
                terms, nz, _ = split_softmax_row(codes, lut, recip)
                probs = normalize_terms(nz, terms)
                ref = safe_softmax_ref(codes.astype(np.float64) * scale)
                assert np.max(np.abs(probs - ref)) < 1e-9

    def test_fixed_mode_row_sum_within_budget(self):
        rng = np.random.default_rng(3)
        lut = build_exp_lut(LN2, "fixed")
        recip = build_recip_lut(8, "fixed")
        for n in (1, 2, 5, 17, 64, 257, 1024):
            codes = rng.integers(-128, 128, n).astype(np.int8)
            codes[rng.integers(0, n)] = 127
            probs = split_softmax_probs(codes, lut, recip)
            total = probs.astype(np.float64).sum() / 127.0
            assert abs(total - 1.0) <= n / 254.0 + 2.0**-7

    def test_monotonicity_preserved(self):
        rng = np.random.default_rng(4)
        lut = build_exp_lut(0.08, "fixed")
        recip = build_recip_lut(8, "fixed")
        for _ in range(30):
            codes = rng.integers(-128, 128, 50).astype(np.int8)
            probs = split_softmax_probs(codes, lut, recip).astype(np.int32)
            order = np.argsort(codes, kind="stable")
            assert np.all(np.diff(probs[order]) >= 0)

    def test_argmax_preserved_above_gap(self):
        rng = np.random.default_rng(8)
        lut = build_exp_lut(0.1, "fixed")
        recip = build_recip_lut(8, "fixed")
        checked = 0
        for _ in range(300):
            codes = rng.integers(-128, 128, 24).astype(np.int8)
            ref = safe_softmax_ref(codes.astype(np.float64) * 0.1)
            top = np.sort(ref)[::-1]
            if top[0] - top[1] <= 2.0 / 127.0:
                continue
            probs = split_softmax_probs(codes, lut, recip)
            assert int(np.argmax(probs)) == int(np.argmax(ref))
            checked += 1
        assert checked > 50

    def test_stream_equals_batch_bit_identical(self):
        rng = np.random.default_rng(9)
        recip_f = build_recip_lut(8, "fixed")
        recip_e = build_recip_lut(8, "exact")
        for mode, recip in (("fixed", recip_f), ("exact", recip_e)):
            lut = build_exp_lut(0.21, mode)
            for _ in range(25):
                n = int(rng.integers(1, 300))
                codes = rng.integers(-128, 128, n).astype(np.int8)
                state = SplitSoftmaxState(lut)
                streamed = [state.push(int(c)) for c in codes]
                nz_stream = state.finalize(recip)
                terms, nz_batch, _ = split_softmax_row(codes, lut, recip)
                assert np.array_equal(np.asarray(streamed), np.asarray(terms))
                if mode == "fixed":
                    assert nz_stream.recip_mantissa == nz_batch.recip_mantissa
                    assert nz_stream.exponent == nz_batch.exponent
                else:
                    assert nz_stream.exact_value == nz_batch.exact_value

    def test_stream_equals_batch_through_saturation(self):
        lut = build_exp_lut(0.01, "fixed")
        recip = build_recip_lut(8, "fixed")
        codes = np.full(300, 127, dtype=np.int8)
        state = SplitSoftmaxState(lut)
        for c in codes:
            state.push(int(c))
        nz_stream = state.finalize(recip)
        _, nz_batch, st_batch = split_softmax_row(codes, lut, recip)
        assert nz_stream.recip_mantissa == nz_batch.recip_mantissa
        assert nz_stream.exponent == nz_batch.exponent
        assert st_batch.diagnostics["denominator_saturations"] > 0

    def test_one_pass_consumption(self):
        # every score is read exactly once by the split pipeline
        class CountingRow:
            def __init__(self, codes):
                self.codes = codes
                self.reads = np.zeros(len(codes), dtype=int)

            def __len__(self):
                return len(self.codes)

            def __getitem__(self, i):
                self.reads[i] += 1
                return self.codes[i]

        lut = build_exp_lut(0.1, "fixed")
        recip = build_recip_lut(8, "fixed")
        row = CountingRow(list(range(-30, 30)))
        state = SplitSoftmaxState(lut)
        for i in range(len(row)):
            state.push(row[i])
        state.finalize(recip)
        assert np.all(row.reads == 1)
        assert state.reads == len(row)

    def test_cross_flow_consistency_one_hot_values(self):
        # V with one-hot columns makes A'V reproduce the probabilities
        rng = np.random.default_rng(10)
        lut = build_exp_lut(0.12, "fixed")
        recip = build_recip_lut(8, "fixed")
        n = 8
        codes = rng.integers(-40, 128, n).astype(np.int8)
        terms, nz, _ = split_softmax_row(codes, lut, recip)
        probs = normalize_terms(nz, terms).astype(np.int64)
        v = np.eye(n, dtype=np.int64) * 127  # one-hot columns at full scale
        acc = AccTensor(terms @ v, (1.0 / 127.0) * (1.0 / 127.0))
        deferred = rescale_accumulator(nz, acc, 1.0 / 127.0)
        assert np.max(np.abs(deferred.codes.astype(np.int64) - probs)) <= 1

    def test_normalizer_value_requires_non_fallback(self):
        lut = build_exp_lut(LN2, "fixed")
        state = SplitSoftmaxState(lut)
        state.push(-128)
        nz = state.finalize(build_recip_lut(8, "fixed"))
        with pytest.raises(SoftmaxError):
            _ = nz.value
        with pytest.raises(SoftmaxError):
            rescale_accumulator(nz, AccTensor(np.zeros(1, dtype=np.int64), 1.0), 1.0)


class TestLutSerialization:
    def test_exp_lut_round_trip(self, tmp_path):
        for mode in ("exact", "fixed"):
            lut = build_exp_lut(0.37, mode, 7, z_quant_max=100)
            path = tmp_path / f"exp_{mode}.cimt"
            save_exp_lut(path, lut)
            back = load_exp_lut(path)
            assert back.mode == mode
            assert back.input_scale == lut.input_scale
            assert back.z_quant_max == 100
            assert np.array_equal(back.entries, lut.entries)

    def test_recip_lut_round_trip(self, tmp_path):
        for mode in ("exact", "fixed"):
            lut = build_recip_lut(9, mode, 15)
            path = tmp_path / f"recip_{mode}.cimt"
            save_recip_lut(path, lut)
            back = load_recip_lut(path)
            assert back.index_bits == 9
            assert np.array_equal(back.entries, lut.entries)
