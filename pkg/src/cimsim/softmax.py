"""Reference softmax implementations and the LUT-based split fixed-point
softmax: a 256-entry exponential table keyed by raw int8 score codes (the
row maximum is replaced by the largest representable code so no max-scan
pass is needed), a running fixed-point denominator, and a reciprocal table
indexed by the leading-one-normalized denominator mantissa.

Numerator terms are quantized to the code range [0, 2**fraction_bits - 1]
with the *maximum* code representing exactly 1.0 (so the default 7-bit
entries carry scale 1/127 and feed the signed int8 multiply path directly).
The denominator accumulates at a wide unsigned fixed-point width (Q8.24 by
default, saturating); the reciprocal table yields M = entry(mantissa) *
2**-exponent so the normalization multiply stays in fixed point.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .fxp import AccTensor, FxpFormat, Q8_24, QuantTensor, rhe_div, rhe_shift_right

INT8_CODES = np.arange(-128, 128, dtype=np.int64)


class SoftmaxError(ValueError):
    """Contract violation in the split-softmax pipeline."""


class Flow(Enum):
    """How the normalizer M is applied downstream."""

    NORMALIZE_THEN_MATMUL = "normalize_then_matmul"
    DEFERRED_NORMALIZATION = "deferred_normalization"


def naive_softmax_ref(z):
    """Plain softmax; overflow is possible by design (unsafe reference)."""
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0 or not np.all(np.isfinite(z)):
        raise SoftmaxError("input must be a non-empty finite vector")
    e = np.exp(z)
    return e / np.sum(e)


def safe_softmax_ref(z):
    """Softmax with the row maximum subtracted before exponentiation."""
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0 or not np.all(np.isfinite(z)):
        raise SoftmaxError("input must be a non-empty finite vector")
    e = np.exp(z - np.max(z))
    return e / np.sum(e)


@dataclass(frozen=True)
class ExpLut:
    """exp table keyed by raw int8 code i: entry(i) ~ e^(input_scale*(i - z_quant_max)).

    mode "exact" stores float64 values; mode "fixed" stores integer codes in
    [0, max_code] where max_code = 2**fraction_bits - 1 represents 1.0.
    """

    input_scale: float
    z_quant_max: int
    mode: str
    fraction_bits: int
    entries: np.ndarray

    @property
    def max_code(self):
        return (1 << self.fraction_bits) - 1

    @property
    def term_scale(self):
        """Scale of emitted numerator codes (fixed mode)."""
        return 1.0 / self.max_code

    def term(self, code):
        """Numerator term for one score code: int code (fixed) or float (exact)."""
        idx = int(code) + 128
        if not 0 <= idx < 256:
            raise SoftmaxError(f"score code {code} outside int8 range")
        if self.mode == "exact":
            return float(self.entries[idx])
        return int(self.entries[idx])

    def term_row(self, codes):
        """Vectorized term lookup for a whole row of score codes."""
        idx = np.asarray(codes, dtype=np.int64) + 128
        if idx.size and (idx.min() < 0 or idx.max() > 255):
            raise SoftmaxError("score codes outside int8 range")
        return self.entries[idx]


def build_exp_lut(input_scale, mode="fixed", fraction_bits=7, z_quant_max=127):
    if not input_scale > 0:
        raise SoftmaxError(f"input_scale must be positive, got {input_scale}")
    if mode not in ("exact", "fixed"):
        raise SoftmaxError(f"mode must be 'exact' or 'fixed', got {mode!r}")
    if not -128 <= z_quant_max <= 127:
        raise SoftmaxError(f"z_quant_max {z_quant_max} outside int8 range")
    # exponents clipped at 0 so entries stay in (0, 1] even when the table is
    # built with z_quant_max below the top code
    exponents = np.minimum(input_scale * (INT8_CODES - z_quant_max), 0.0)
    values = np.exp(exponents)
    if mode == "exact":
        return ExpLut(float(input_scale), int(z_quant_max), mode, fraction_bits, values)
    max_code = (1 << fraction_bits) - 1
    entries = np.clip(np.rint(values * max_code), 0, max_code).astype(np.int64)
    entries[z_quant_max + 128] = max_code  # pin: e^0 is exactly 1.0
    if z_quant_max > -128 and int(entries[z_quant_max + 128 - 1]) == 0:
        warnings.warn(
            f"exp table degenerate: input_scale={input_scale} rounds every entry "
            f"below code {z_quant_max} to zero",
            RuntimeWarning,
            stacklevel=2,
        )
    return ExpLut(float(input_scale), int(z_quant_max), mode, fraction_bits, entries)


@dataclass(frozen=True)
class RecipLut:
    """Reciprocal table over the normalized mantissa m = 1 + t*2**-k in [1, 2)."""

    index_bits: int
    mode: str
    fraction_bits: int
    entries: np.ndarray

    def entry(self, t):
        t = int(t)
        if not 0 <= t < (1 << self.index_bits):
            raise SoftmaxError(f"mantissa index {t} outside table")
        if self.mode == "exact":
            return float(self.entries[t])
        return int(self.entries[t])


def build_recip_lut(k=8, mode="fixed", fraction_bits=15):
    if not 4 <= k <= 12:
        raise SoftmaxError(f"index bits k must be in 4..12, got {k}")
    if mode not in ("exact", "fixed"):
        raise SoftmaxError(f"mode must be 'exact' or 'fixed', got {mode!r}")
    t = np.arange(1 << k, dtype=np.float64)
    values = 1.0 / (1.0 + t * 2.0**-k)
    if mode == "exact":
        return RecipLut(k, mode, fraction_bits, values)
    entries = np.rint(values * (1 << fraction_bits)).astype(np.int64)
    return RecipLut(k, mode, fraction_bits, entries)


@dataclass(frozen=True)
class Normalizer:
    """The reciprocal factor M produced by finalize.

    Fixed mode carries (recip_mantissa, recip_fraction_bits, exponent) so the
    probability multiply stays in integer arithmetic; exact mode carries 1/D
    directly.  ``fallback`` marks an all-underflowed denominator, resolved as
    a uniform distribution over ``count`` tokens.
    """

    mode: str
    count: int
    numerator_max_code: int
    fallback: bool = False
    recip_mantissa: int = 0
    recip_fraction_bits: int = 0
    exponent: int = 0
    exact_value: float = 0.0

    @property
    def value(self):
        if self.fallback:
            raise SoftmaxError("fallback normalizer has no reciprocal value")
        if self.mode == "exact":
            return self.exact_value
        return self.recip_mantissa * 2.0 ** (-(self.recip_fraction_bits + self.exponent))


class SplitSoftmaxState:
    """Single-owner streaming state for one score row.

    Each score code is consumed exactly once: push() emits the quantized
    numerator term and folds the same represented value into the running
    denominator.  Masked positions are simply never pushed.
    """

    def __init__(self, exp_lut, flow=Flow.NORMALIZE_THEN_MATMUL, denom_format=Q8_24):
        if denom_format.signed:
            raise SoftmaxError("denominator format must be unsigned")
        self.exp_lut = exp_lut
        self.flow = flow
        self.denom_format = denom_format
        self.count = 0
        self.reads = 0
        self.terms = []
        self.finalized = False
        self.diagnostics = {"underflow_fallbacks": 0, "denominator_saturations": 0}
        self._denom_int = 0
        self._denom_float = 0.0

    def push(self, code):
        """Consume one score code; returns the emitted numerator term."""
        if self.finalized:
            raise SoftmaxError("push after finalize")
        term = self.exp_lut.term(code)
        self.reads += 1
        self.count += 1
        self.terms.append(term)
        if self.exp_lut.mode == "exact":
            self._denom_float += term
        else:
            # accumulate the represented value term/max_code at the wide width
            inc = rhe_div(term << self.denom_format.fraction_bits, self.exp_lut.max_code)
            acc = self._denom_int + inc
            if acc > self.denom_format.max_mantissa:
                acc = self.denom_format.max_mantissa
                self.diagnostics["denominator_saturations"] += 1
            self._denom_int = acc
        return term

    @property
    def denominator_value(self):
        if self.exp_lut.mode == "exact":
            return self._denom_float
        return self._denom_int * 2.0 ** (-self.denom_format.fraction_bits)

    def finalize(self, recip_lut):
        """Produce the normalizer M ~ 1/denominator."""
        if self.finalized:
            raise SoftmaxError("finalize called twice")
        if self.count < 1:
            raise SoftmaxError("finalize before any token was pushed")
        self.finalized = True
        max_code = self.exp_lut.max_code
        if self.exp_lut.mode == "exact":
            if self._denom_float <= 0.0:
                self.diagnostics["underflow_fallbacks"] += 1
                return Normalizer("exact", self.count, max_code, fallback=True)
            return Normalizer(
                "exact", self.count, max_code, exact_value=1.0 / self._denom_float
            )
        if self._denom_int == 0:
            self.diagnostics["underflow_fallbacks"] += 1
            return Normalizer("fixed", self.count, max_code, fallback=True)
        mantissa, exponent = _normalize_leading_one(
            self._denom_int, self.denom_format.fraction_bits, recip_lut.index_bits
        )
        return Normalizer(
            "fixed",
            self.count,
            max_code,
            recip_mantissa=recip_lut.entry(mantissa),
            recip_fraction_bits=recip_lut.fraction_bits,
            exponent=exponent,
        )


def _normalize_leading_one(mantissa_int, fraction_bits, index_bits):
    """D = m * 2**e with m in [1, 2); returns (table index of m, e)."""
    beta = mantissa_int.bit_length()
    exponent = beta - 1 - fraction_bits
    shift = beta - 1 - index_bits
    if shift >= 0:
        top = mantissa_int >> shift
    else:
        top = mantissa_int << (-shift)
    return top - (1 << index_bits), exponent


def normalize_terms(normalizer, terms):
    """NormalizeThenMatmul flow: probabilities p_i = term_i * M.

    Fixed mode returns int8 codes in [0, numerator_max_code] at scale
    1/numerator_max_code; exact mode returns float probabilities.
    """
    if normalizer.mode == "exact":
        terms = np.asarray(terms, dtype=np.float64)
        if normalizer.fallback:
            return np.full(terms.shape, 1.0 / normalizer.count)
        return terms * normalizer.exact_value
    terms = np.asarray(terms, dtype=np.int64)
    max_code = normalizer.numerator_max_code
    if normalizer.fallback:
        code = rhe_div(max_code, normalizer.count)
        return np.full(terms.shape, code, dtype=np.int8)
    shift = normalizer.recip_fraction_bits + normalizer.exponent
    prods = terms * normalizer.recip_mantissa
    codes = _rhe_shift_right_vec(prods, shift)
    return np.clip(codes, 0, max_code).astype(np.int8)


def rescale_accumulator(normalizer, acc, out_scale):
    """DeferredNormalization flow: scale a pre-accumulated sum_j term_j*V_j by M.

    The caller must handle fallback normalizers (the accumulated sum is zero
    in that case, so a uniform distribution has to be re-accumulated).
    """
    if normalizer.fallback:
        raise SoftmaxError("fallback normalizer cannot rescale an accumulator")
    if not out_scale > 0:
        raise SoftmaxError(f"out_scale must be positive, got {out_scale}")
    scaled = acc.values.astype(np.float64) * (acc.scale * normalizer.value / out_scale)
    codes = np.clip(np.rint(scaled), -128, 127).astype(np.int8)
    return QuantTensor(codes, float(out_scale))


def _rhe_shift_right_vec(values, shift):
    if shift <= 0:
        return values << (-shift)
    div = np.int64(1) << np.int64(shift)
    q = values >> np.int64(shift)
    r = values - (q << np.int64(shift))
    half = div >> np.int64(1)
    round_up = (r > half) | ((r == half) & ((q & 1) == 1))
    return q + round_up.astype(np.int64)


def split_softmax_row(codes, exp_lut, recip_lut, flow=Flow.NORMALIZE_THEN_MATMUL,
                      denom_format=Q8_24):
    """Evaluate one whole row through the streaming pipeline.

    Bit-identical to pushing element by element (it is the same arithmetic,
    vectorized); returns (terms, normalizer, state diagnostics).
    """
    codes = np.asarray(codes, dtype=np.int8)
    if codes.ndim != 1 or codes.size == 0:
        raise SoftmaxError("row must be a non-empty vector")
    state = SplitSoftmaxState(exp_lut, flow, denom_format)
    terms = exp_lut.term_row(codes)
    state.count = codes.size
    state.reads = codes.size
    state.terms = list(terms)
    if exp_lut.mode == "exact":
        # strictly sequential accumulation, matching push order
        state._denom_float = float(np.add.accumulate(terms)[-1])
    else:
        incs = _rhe_div_vec(terms << np.int64(denom_format.fraction_bits),
                            exp_lut.max_code)
        total = int(np.sum(incs))
        if total > denom_format.max_mantissa:
            # replay saturation sequentially (rare; keeps stream equivalence)
            state.terms = []
            state.count = 0
            state.reads = 0
            state._denom_float = 0.0
            for c in codes:
                state.push(int(c))
            return np.asarray(state.terms, dtype=np.int64), state.finalize(recip_lut), state
        state._denom_int = total
    normalizer = state.finalize(recip_lut)
    if exp_lut.mode == "exact":
        return terms, normalizer, state
    return terms.astype(np.int64), normalizer, state


def _rhe_div_vec(numer, denom):
    q = numer // denom
    r = numer - q * denom
    round_up = (2 * r > denom) | ((2 * r == denom) & ((q & 1) == 1))
    return q + round_up.astype(np.int64)


def split_softmax_probs(codes, exp_lut, recip_lut, denom_format=Q8_24):
    """Row of score codes -> probabilities (int8 codes in fixed mode, floats
    in exact mode) via the full push/finalize/apply pipeline."""
    terms, normalizer, _ = split_softmax_row(codes, exp_lut, recip_lut,
                                             denom_format=denom_format)
    return normalize_terms(normalizer, terms)


def save_exp_lut(path, lut):
    """Dump an exp table in the shared container (float64 entries for exact
    mode, int32 for fixed), with the score scale and shift code in the
    extended header."""
    from .container import write_tensor

    entries = (lut.entries if lut.mode == "exact"
               else lut.entries.astype(np.int32))
    write_tensor(path, entries, scale=1.0,
                 extra={"input_scale": lut.input_scale,
                        "z_quant_max": lut.z_quant_max,
                        "fraction_bits": lut.fraction_bits})


def load_exp_lut(path):
    from .container import read_tensor

    entries, _, extra = read_tensor(path)
    mode = "exact" if entries.dtype == np.float64 else "fixed"
    return ExpLut(extra["input_scale"], extra["z_quant_max"], mode,
                  extra["fraction_bits"],
                  entries if mode == "exact" else entries.astype(np.int64))


def save_recip_lut(path, lut):
    from .container import write_tensor

    entries = (lut.entries if lut.mode == "exact"
               else lut.entries.astype(np.int32))
    write_tensor(path, entries, scale=1.0,
                 extra={"index_bits": lut.index_bits,
                        "fraction_bits": lut.fraction_bits})


def load_recip_lut(path):
    from .container import read_tensor

    entries, _, extra = read_tensor(path)
    mode = "exact" if entries.dtype == np.float64 else "fixed"
    return RecipLut(extra["index_bits"], mode, extra["fraction_bits"],
                    entries if mode == "exact" else entries.astype(np.int64))
