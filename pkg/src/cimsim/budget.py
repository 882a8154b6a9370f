"""Analytic error budgets for the int8 attention pipeline vs a float oracle.

The integer matmuls are exact, so every error term is a requantization step,
a softmax-table resolution, or the propagation of an upstream error through
a matmul or the softmax.  The bounds below are conservative interval-style
compositions evaluated with quantities measured during the run (tensor
maxima, the smallest per-row denominator); a run whose measured error
exceeds its composed budget is marked FAILED.
"""

from __future__ import annotations

import math


def requant_step(scale):
    """Worst-case rounding error of one requantization at ``scale``."""
    return scale / 2.0


def softmax_pipeline_budget(n, denom_min, numerator_max_code=127,
                            recip_index_bits=8, recip_fraction_bits=15,
                            denom_fraction_bits=24):
    """Per-element bound on |fixed-pipeline probability - exact softmax of the
    same quantized scores|.

    Derivation sketch: each numerator term carries at most half a code step
    (1/(2*max_code)) of error, the denominator therefore at most n steps plus
    its own accumulation rounding; dividing through the measured denominator
    D gives (n+1)*step/2/D.  The reciprocal table adds a one-sided relative
    error 2**-k (floor indexing) plus entry rounding, and the final output
    rounding adds half a step.  Rows whose denominator underflowed to zero
    fall back to a uniform distribution, for which no nontrivial bound holds;
    the budget saturates at 1.
    """
    if n < 1:
        raise ValueError("row length must be >= 1")
    if denom_min <= 0:
        return 1.0
    half_step = 0.5 / numerator_max_code
    term_noise = (n + 1) * half_step / denom_min
    accum_noise = n * 2.0 ** (-(denom_fraction_bits + 1)) / denom_min
    recip_noise = 2.0 ** (-recip_index_bits) + 2.0 ** (-recip_fraction_bits)
    return min(1.0, term_noise + accum_noise + recip_noise + half_step)


def score_budget(d_head, q_max, k_max, e_q, e_k, score_scale):
    """Bound on the dequantized attention-score error given per-element
    errors of Q and K and their measured magnitudes."""
    gemm = d_head * ((q_max + e_q) * e_k + (k_max + e_k) * e_q)
    return gemm / math.sqrt(d_head) + requant_step(score_scale)


def softmax_shift_budget(e_score, score_scale):
    """Probability shift from perturbed scores.

    The softmax Jacobian has infinity-norm at most 1/2, so a per-score error
    of e (in real units) moves any output by at most e; the score
    quantization itself is already inside e_score.
    """
    del score_scale  # folded into e_score by the caller
    return e_score


def head_output_budget(n_ctx, e_prob, v_max, e_v, out_scale):
    """Bound for one attention output element: sum of n_ctx probability
    errors against values plus the value error itself and the requant step
    (probabilities sum to ~1)."""
    return n_ctx * e_prob * (v_max + e_v) + e_v + requant_step(out_scale)


def attention_layer_budget(cfg, scales, tables, head_stats, e_q_in=0.0,
                           e_kv_in=0.0, w_max=None):
    """Per-element output bound for one multi-head attention layer.

    head_stats is the per-head stats list returned by multi_head_attention;
    e_q_in / e_kv_in are the input errors of the query / key-value source
    sequences vs the oracle's (zero for a first layer fed by the shared int8
    workload).  w_max maps weight names to dequantized maxima when the
    inputs carry errors.
    """
    d_model = cfg.d_model
    w_max = w_max or {}
    head_bounds = []
    for h, stats in enumerate(head_stats):
        hs = scales.heads[h]
        e_q = d_model * w_max.get("wq", 0.0) * e_q_in + requant_step(hs.q)
        e_k = d_model * w_max.get("wk", 0.0) * e_kv_in + requant_step(hs.k)
        e_v = d_model * w_max.get("wv", 0.0) * e_kv_in + requant_step(hs.v)
        e_z = score_budget(cfg.d_head, stats["q_max"], stats["k_max"],
                           e_q, e_k, hs.score)
        exp_lut = tables.exp_luts[h]
        e_pipe = softmax_pipeline_budget(
            stats["max_context"], stats["min_denominator"],
            numerator_max_code=exp_lut.max_code,
            recip_index_bits=tables.recip.index_bits,
            recip_fraction_bits=tables.recip.fraction_bits,
            denom_fraction_bits=tables.denom_format.fraction_bits,
        )
        e_p = softmax_shift_budget(e_z, hs.score) + e_pipe
        head_bounds.append(
            head_output_budget(stats["max_context"], e_p, stats["v_max"],
                               e_v, hs.out)
        )
    e_concat = max(head_bounds) + requant_step(scales.concat)
    e_final = d_model * e_concat * w_max.get("wo", 0.0) + requant_step(scales.final)
    return {
        "per_head": head_bounds,
        "concat": e_concat,
        "final": e_final,
    }
