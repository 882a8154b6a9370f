"""Fixed-point formats, symmetric int8 quantization, and the 32b-to-8b
requantization step between the accumulators and the softmax / write-back
paths.

All rounding is round-half-to-even so long accumulations stay unbiased and
every oracle can match results bit for bit.  Quantization is symmetric
(zero_point fixed at 0) with per-tensor scales.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INT8_MIN = -128
INT8_MAX = 127


class FxpError(ValueError):
    """Invalid fixed-point operand or format."""


@dataclass(frozen=True)
class FxpFormat:
    """Two's-complement fixed-point format: ``value = mantissa * 2**-fraction_bits``."""

    integer_bits: int
    fraction_bits: int
    signed: bool = True

    def __post_init__(self):
        total = self.integer_bits + self.fraction_bits + (1 if self.signed else 0)
        if total <= 0 or total > 64:
            raise FxpError(f"total width {total} out of range (1..64)")
        if self.integer_bits < 0 or self.fraction_bits < 0:
            raise FxpError("negative field width")

    @property
    def max_mantissa(self):
        return (1 << (self.integer_bits + self.fraction_bits)) - 1

    @property
    def min_mantissa(self):
        return -(1 << (self.integer_bits + self.fraction_bits)) if self.signed else 0

    def saturate(self, mantissa):
        return max(self.min_mantissa, min(self.max_mantissa, mantissa))

    def to_value(self, mantissa):
        return mantissa * 2.0 ** (-self.fraction_bits)


@dataclass(frozen=True)
class FxpValue:
    """A scalar in a declared fixed-point format."""

    mantissa: int
    fmt: FxpFormat

    def __post_init__(self):
        if not self.fmt.min_mantissa <= self.mantissa <= self.fmt.max_mantissa:
            raise FxpError(f"mantissa {self.mantissa} does not fit {self.fmt}")

    @property
    def value(self):
        return self.fmt.to_value(self.mantissa)


# Default wide accumulator format for the softmax denominator (Q8.24).
Q8_24 = FxpFormat(integer_bits=8, fraction_bits=24, signed=False)


def rhe_shift_right(value, shift):
    """Round-half-to-even integer shift: round(value / 2**shift) for ints.

    Negative shifts are exact left shifts.
    """
    value = int(value)
    shift = int(shift)
    if shift <= 0:
        return value << (-shift)
    div = 1 << shift
    q, r = divmod(value, div)
    half = div >> 1
    if r > half or (r == half and (q & 1)):
        q += 1
    return q


def rhe_div(numer, denom):
    """Round-half-to-even of the exact rational numer/denom (ints, denom > 0)."""
    numer = int(numer)
    denom = int(denom)
    q, r = divmod(numer, denom)
    twice = 2 * r
    if twice > denom or (twice == denom and (q & 1)):
        q += 1
    return q


@dataclass(frozen=True)
class QuantTensor:
    """Symmetric int8 tensor: real value = scale * code, zero_point = 0."""

    codes: np.ndarray
    scale: float

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int8)
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        if not (self.scale > 0):
            raise FxpError(f"scale must be positive, got {self.scale}")

    @property
    def shape(self):
        return self.codes.shape

    def dequantize(self):
        return self.codes.astype(np.float64) * self.scale


@dataclass(frozen=True)
class AccTensor:
    """Signed 32-bit accumulator tensor with scale = product of input scales."""

    values: np.ndarray
    scale: float

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.dtype != np.int64:
            values = values.astype(np.int64)
        if np.any(values > np.iinfo(np.int32).max) or np.any(values < np.iinfo(np.int32).min):
            raise FxpError("accumulator value exceeds 32-bit range")
        values = values.astype(np.int32)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if not (self.scale > 0):
            raise FxpError(f"scale must be positive, got {self.scale}")

    @property
    def shape(self):
        return self.values.shape

    def dequantize(self):
        return self.values.astype(np.float64) * self.scale


def quantize(x, bits=8, scale=None):
    """Quantize a real tensor to symmetric signed codes.

    scale defaults to max_abs(x) / qmax; an all-zero tensor gets scale 1 so
    the codes stay zero without a division by zero.  Codes are
    round-half-to-even and saturated to the signed range of ``bits``.
    """
    if bits not in (4, 8):
        raise FxpError(f"bits must be 4 or 8, got {bits}")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise FxpError("input contains non-finite values")
    qmax = (1 << (bits - 1)) - 1
    qmin = -(1 << (bits - 1))
    if scale is None:
        amax = float(np.max(np.abs(x))) if x.size else 0.0
        scale = amax / qmax if amax > 0 else 1.0
    if not scale > 0:
        raise FxpError(f"scale must be positive, got {scale}")
    codes = np.clip(np.rint(x / scale), qmin, qmax).astype(np.int8)
    return QuantTensor(codes, float(scale))


def dequantize(qt):
    return qt.dequantize()


def requantize_32_to_8(acc, out_scale):
    """Narrow a 32-bit accumulator tensor to int8 at ``out_scale``.

    code = saturate8(round_half_even(value * acc.scale / out_scale)); overflow
    saturates by definition.
    """
    if not out_scale > 0:
        raise FxpError(f"out_scale must be positive, got {out_scale}")
    scaled = acc.values.astype(np.float64) * (acc.scale / out_scale)
    codes = np.clip(np.rint(scaled), INT8_MIN, INT8_MAX).astype(np.int8)
    return QuantTensor(codes, float(out_scale))


def fxp_mul(a, b, out):
    """Exact fixed-point product, then round-half-even and saturate to ``out``."""
    prod = a.mantissa * b.mantissa  # exact at a.f + b.f fraction bits
    shift = a.fmt.fraction_bits + b.fmt.fraction_bits - out.fraction_bits
    mant = rhe_shift_right(prod, shift)
    return FxpValue(out.saturate(mant), out)
