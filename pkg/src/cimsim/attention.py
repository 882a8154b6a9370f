"""Executable dataflows for the three attention mappings: full-sequence
encoder attention, token-at-a-time decoder attention with a KV cache, and
cross-attention over encoder outputs, plus the three-stage multi-head flow
(weight projection, activation-to-activation, concatenation with the output
weights).

Scales are static per head, derived once by calibration over the workload;
decoder replay therefore matches causal encoder attention bit for bit: the
integer matmuls are exact, both paths requantize with the same constants,
and masked positions are simply never pushed into the softmax state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import cim_core
from .cim_core import CimError, tiled_matmul
from .fxp import AccTensor, Q8_24, QuantTensor, requantize_32_to_8, rhe_div
from .softmax import (
    Flow,
    SplitSoftmaxState,
    build_exp_lut,
    build_recip_lut,
    normalize_terms,
    rescale_accumulator,
)


class Mode(Enum):
    ENCODER_ONLY = "encoder"
    DECODER_ONLY = "decoder"
    ENCODER_DECODER = "encoder_decoder"


@dataclass(frozen=True)
class AttentionConfig:
    n_tokens: int
    d_model: int
    n_heads: int
    mode: Mode
    flow: Flow = Flow.NORMALIZE_THEN_MATMUL
    causal: bool = False

    def __post_init__(self):
        if self.n_tokens < 1:
            raise ValueError("n_tokens must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.mode == Mode.DECODER_ONLY and not self.causal:
            object.__setattr__(self, "causal", True)  # decoder-only is always causal

    @property
    def d_head(self):
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class MappingPlan:
    """Which operands sit in the CIM versus stream in, and the bank schedule.

    tile_schedule entries are (partition, bank, (stored_row, dot_chunk));
    every (row, chunk) tile of the stored operand appears exactly once.
    """

    resident_operands: tuple
    streamed_operand: str
    tile_schedule: tuple


def make_mapping_plan(rows, depth, resident=("stored",), streamed="streamed"):
    chunks = -(-depth // cim_core.LANES)
    schedule = []
    for unit in range(rows * chunks):
        row, chunk = divmod(unit, chunks)
        partition = unit % cim_core.PARTITIONS
        bank = (unit // cim_core.PARTITIONS) % cim_core.BANKS_PER_PARTITION
        schedule.append((partition, bank, (row, chunk)))
    return MappingPlan(tuple(resident), streamed, tuple(schedule))


@dataclass(frozen=True)
class HeadScales:
    q: float
    k: float
    v: float
    score: float  # dequantization scale of int8 attention-score codes
    out: float    # scale of the per-head attention output


@dataclass(frozen=True)
class ScaleSet:
    heads: tuple
    concat: float  # shared scale of the concatenated head outputs
    final: float   # scale of the W^O stage output


@dataclass(frozen=True)
class SoftmaxTables:
    exp_luts: tuple  # one per head (score scales differ per head)
    recip: object
    denom_format: object = Q8_24


@dataclass(frozen=True)
class AttentionWeights:
    """Per-head projection weights (d_model x d_head each) plus W^O."""

    wq: tuple
    wk: tuple
    wv: tuple
    wo: QuantTensor


class KvCache:
    """Per-head append-only key/value history; entries immutable once added."""

    def __init__(self, n_heads=1):
        self._keys = [[] for _ in range(n_heads)]
        self._values = [[] for _ in range(n_heads)]

    def append(self, head, k_row, v_row):
        k = _as_row(k_row)
        v = _as_row(v_row)
        if self._keys[head]:
            if k.scale != self._keys[head][0].scale:
                raise ValueError("key scale differs from cached entries")
            if v.scale != self._values[head][0].scale:
                raise ValueError("value scale differs from cached entries")
        self._keys[head].append(k)
        self._values[head].append(v)

    def length(self, head=0):
        return len(self._keys[head])

    def keys(self, head=0):
        rows = self._keys[head]
        return QuantTensor(np.vstack([r.codes for r in rows]), rows[0].scale)

    def values(self, head=0):
        rows = self._values[head]
        return QuantTensor(np.vstack([r.codes for r in rows]), rows[0].scale)


def _fresh_diag():
    return {"underflow_fallbacks": 0, "denominator_saturations": 0,
            "min_denominator": math.inf, "max_context": 0}


def _merge_diag(total, diag):
    total["underflow_fallbacks"] += diag["underflow_fallbacks"]
    total["denominator_saturations"] += diag["denominator_saturations"]
    total["min_denominator"] = min(total["min_denominator"],
                                   diag["min_denominator"])
    total["max_context"] = max(total["max_context"], diag["max_context"])


def _as_row(qt):
    codes = qt.codes
    if codes.ndim == 1:
        codes = codes.reshape(1, -1)
    if codes.ndim != 2 or codes.shape[0] != 1:
        raise ValueError(f"expected a single token row, got shape {qt.codes.shape}")
    return QuantTensor(codes, qt.scale)


def project_qkv(macro, x, wq, wk, wv, out_scales=None):
    """Weight projection Q = X Wq, K = X Wk, V = X Wv through the CIM with
    the weights resident, each requantized to int8.

    out_scales is (sq, sk, sv); None derives each from the accumulator
    maximum (an all-zero result gets scale 1).
    """
    results = []
    for idx, w in enumerate((wq, wk, wv)):
        if x.codes.shape[1] != w.codes.shape[0]:
            raise CimError(f"projection shape mismatch: {x.shape} x {w.shape}")
        w_t = QuantTensor(w.codes.T, w.scale)
        x_t = QuantTensor(x.codes.T, x.scale)
        plan = make_mapping_plan(w_t.codes.shape[0], w_t.codes.shape[1],
                                 resident=("W",), streamed="X")
        acc = tiled_matmul(macro, plan, w_t, x_t)
        acc = AccTensor(acc.values.T, acc.scale)
        scale = out_scales[idx] if out_scales is not None else _amax_scale(acc)
        results.append(requantize_32_to_8(acc, scale))
    return tuple(results)


def _amax_scale(acc):
    amax = int(np.max(np.abs(acc.values))) if acc.values.size else 0
    return amax * acc.scale / 127.0 if amax > 0 else 1.0


def _score_codes(macro, q, k, d_head, score_scale):
    """QK^T through the CIM (Q resident, K^T streamed), 1/sqrt(d) folded into
    the requantization scale."""
    k_t = QuantTensor(k.codes.T, k.scale)
    plan = make_mapping_plan(q.codes.shape[0], q.codes.shape[1],
                             resident=("Q", "V"), streamed="KT")
    acc = tiled_matmul(macro, plan, q, k_t)
    acc = AccTensor(acc.values, acc.scale / math.sqrt(d_head))
    return requantize_32_to_8(acc, score_scale)


def score_codes_for_head(macro, q, k, cfg, head_scales):
    """Public wrapper: the int8 attention-score codes for one head."""
    return _score_codes(macro, q, k, cfg.d_head, head_scales.score)


def _softmax_row_outputs(macro, score_row_codes, v, exp_lut, recip_lut,
                         denom_format, flow, out_scale):
    """Split softmax over one row of score codes followed by the V multiply.

    Returns the output row (1 x d_head int8) plus the row diagnostics.
    """
    state = SplitSoftmaxState(exp_lut, flow, denom_format)
    for code in score_row_codes:
        state.push(int(code))
    denom = state.denominator_value
    normalizer = state.finalize(recip_lut)
    n = normalizer.count
    terms = np.asarray(state.terms, dtype=np.int64)
    if flow == Flow.NORMALIZE_THEN_MATMUL or normalizer.fallback:
        if normalizer.fallback:
            probs = np.full(n, rhe_div(normalizer.numerator_max_code, n),
                            dtype=np.int8)
        else:
            probs = normalize_terms(normalizer, terms)
        p_row = QuantTensor(probs.reshape(1, -1), 1.0 / normalizer.numerator_max_code)
        plan = make_mapping_plan(1, n, resident=("V",), streamed="A'")
        acc = tiled_matmul(macro, plan, p_row, QuantTensor(v.codes[:n], v.scale))
        out = requantize_32_to_8(acc, out_scale)
    else:
        t_row = QuantTensor(terms.astype(np.int8).reshape(1, -1),
                            1.0 / normalizer.numerator_max_code)
        plan = make_mapping_plan(1, n, resident=("V",), streamed="exp_terms")
        acc = tiled_matmul(macro, plan, t_row, QuantTensor(v.codes[:n], v.scale))
        out = rescale_accumulator(normalizer, acc, out_scale)
    diag = dict(state.diagnostics)
    diag["min_denominator"] = denom
    diag["max_context"] = n
    return out, diag


def encoder_attention(macro, q, k, v, tables, cfg, head_scales, head=0,
                      causal=None):
    """Full-sequence attention for one head: QK^T scores, split softmax per
    row, then the V multiply (flow-dependent ordering); int8 in, int8 out."""
    if q.codes.shape[1] != k.codes.shape[1]:
        raise CimError("query/key head dimensions differ")
    if k.codes.shape[0] != v.codes.shape[0]:
        raise CimError("key/value token counts differ")
    causal = cfg.causal if causal is None else causal
    scores = _score_codes(macro, q, k, cfg.d_head, head_scales.score)
    exp_lut = tables.exp_luts[head]
    n_q = q.codes.shape[0]
    out_rows = []
    diagnostics = _fresh_diag()
    for i in range(n_q):
        limit = i + 1 if causal else k.codes.shape[0]
        row, diag = _softmax_row_outputs(
            macro, scores.codes[i, :limit], v, exp_lut, tables.recip,
            tables.denom_format, cfg.flow, head_scales.out,
        )
        out_rows.append(row.codes)
        _merge_diag(diagnostics, diag)
    return QuantTensor(np.vstack(out_rows), head_scales.out), diagnostics


def decoder_step(macro, q_n, k_n, v_n, cache, tables, cfg, head_scales,
                 head=0):
    """One autoregressive step: append (k_n, v_n), score the query against
    all cached keys, stream the split softmax, and emit one output token.

    Scores use the same static scales as the encoder path, so a full replay
    is bit-identical to causal encoder attention.
    """
    if q_n is None:
        raise CimError("decoder step requires the current query token")
    cache.append(head, k_n, v_n)
    q_row = _as_row(q_n)
    keys = cache.keys(head)
    plan = make_mapping_plan(keys.codes.shape[0], keys.codes.shape[1],
                             resident=("KT", "V"), streamed="Q")
    acc = tiled_matmul(macro, plan, keys,
                       QuantTensor(q_row.codes.T, q_row.scale))
    acc = AccTensor(acc.values.T, acc.scale / math.sqrt(cfg.d_head))
    scores = requantize_32_to_8(acc, head_scales.score)
    out, diag = _softmax_row_outputs(
        macro, scores.codes[0], cache.values(head), tables.exp_luts[head],
        tables.recip, tables.denom_format, cfg.flow, head_scales.out,
    )
    return out, diag


def encoder_decoder_attention(macro, q_dec, k_enc, v_enc, tables, cfg,
                              head_scales, head=0):
    """Cross-attention: decoder queries against encoder keys/values resident
    in the CIM; numerically identical to encoder attention with mismatched
    row/column token counts."""
    if q_dec.codes.shape[1] != k_enc.codes.shape[1]:
        raise CimError("encoder/decoder head dimensions differ")
    return encoder_attention(macro, q_dec, k_enc, v_enc, tables, cfg,
                             head_scales, head=head, causal=False)


def multi_head_attention(macro, x, weights, tables, cfg, scales, x_kv=None):
    """Per-head pipeline, concatenation in head-index order, then W^O.

    x_kv supplies a separate key/value source sequence (cross-attention);
    self-attention when None.  Returns (output, per-head outputs, per-head
    stats dicts).
    """
    n_heads = cfg.n_heads
    head_outputs = []
    head_stats = []
    for h in range(n_heads):
        hs = scales.heads[h]
        q, k, v = _project_head(macro, x, x_kv, weights, h, hs)
        if cfg.mode == Mode.DECODER_ONLY:
            cache = KvCache(n_heads)
            rows = []
            diagnostics = _fresh_diag()
            for t in range(x.codes.shape[0]):
                out, diag = decoder_step(
                    macro,
                    QuantTensor(q.codes[t:t + 1], q.scale),
                    QuantTensor(k.codes[t:t + 1], k.scale),
                    QuantTensor(v.codes[t:t + 1], v.scale),
                    cache, tables, cfg, hs, head=h,
                )
                rows.append(out.codes)
                _merge_diag(diagnostics, diag)
            head_out = QuantTensor(np.vstack(rows), hs.out)
        else:
            head_out, diagnostics = encoder_attention(macro, q, k, v, tables,
                                                      cfg, hs, head=h)
        head_outputs.append(head_out)
        stats = dict(diagnostics)
        stats.update({
            "q_max": float(np.max(np.abs(q.dequantize()), initial=0.0)),
            "k_max": float(np.max(np.abs(k.dequantize()), initial=0.0)),
            "v_max": float(np.max(np.abs(v.dequantize()), initial=0.0)),
        })
        head_stats.append(stats)
    concat = concat_heads(head_outputs, scales.concat)
    plan = make_mapping_plan(weights.wo.codes.shape[1],
                             weights.wo.codes.shape[0],
                             resident=("WO",), streamed="concat")
    acc = tiled_matmul(macro, plan,
                       QuantTensor(weights.wo.codes.T, weights.wo.scale),
                       QuantTensor(concat.codes.T, concat.scale))
    out = requantize_32_to_8(AccTensor(acc.values.T, acc.scale), scales.final)
    return out, head_outputs, head_stats


def _project_head(macro, x, x_kv, weights, head, head_scales=None):
    """Project Q from x and K, V from x_kv (or x for self-attention)."""
    out_scales = None
    if head_scales is not None:
        out_scales = (head_scales.q, head_scales.k, head_scales.v)
    w3 = (weights.wq[head], weights.wk[head], weights.wv[head])
    if x_kv is None:
        return project_qkv(macro, x, *w3, out_scales=out_scales)
    q, _, _ = project_qkv(macro, x, *w3, out_scales=out_scales)
    _, k, v = project_qkv(macro, x_kv, *w3, out_scales=out_scales)
    return q, k, v


def concat_heads(head_outputs, concat_scale):
    """Concatenate per-head outputs along features, requantized to the shared
    scale (per-head scales never exceed it, so codes cannot saturate up)."""
    blocks = []
    for out in head_outputs:
        rescaled = np.clip(
            np.rint(out.codes.astype(np.float64) * (out.scale / concat_scale)),
            -128, 127,
        ).astype(np.int8)
        blocks.append(rescaled)
    return QuantTensor(np.hstack(blocks), concat_scale)


def calibrate_scales(macro, x, weights, cfg, lut_fraction_bits=7,
                     recip_index_bits=8, recip_fraction_bits=15,
                     lut_mode="fixed", denom_format=Q8_24, x_kv=None):
    """Derive the static per-head scale set and softmax tables for a workload.

    Stage 1 calibrates projection and score scales from exact integer
    accumulators (causal workloads calibrate on the causally valid scores);
    stage 2 dry-runs the heads to calibrate the W^O stage.  Calibration is
    deterministic, so every later run (encoder, decoder replay, either
    schedule) shares identical constants.
    """
    if lut_mode != "fixed":
        raise CimError("the attention pipeline requires fixed-mode tables "
                       "(exact tables are for softmax evaluation only)")
    head_scales = []
    exp_luts = []
    recip = build_recip_lut(recip_index_bits, lut_mode, recip_fraction_bits)
    for h in range(cfg.n_heads):
        q, k, v = _project_head(macro, x, x_kv, weights, h)
        k_t = QuantTensor(k.codes.T, k.scale)
        plan = make_mapping_plan(q.codes.shape[0], q.codes.shape[1],
                                 resident=("Q",), streamed="KT")
        acc = tiled_matmul(macro, plan, q, k_t)
        values = acc.values
        if cfg.causal and x_kv is None:
            values = np.tril(values)
        amax = int(np.max(np.abs(values))) if values.size else 0
        score_scale = (amax * acc.scale / (math.sqrt(cfg.d_head) * 127.0)
                       if amax > 0 else 1.0)
        hs = HeadScales(q=q.scale, k=k.scale, v=v.scale, score=score_scale,
                        out=v.scale)
        head_scales.append(hs)
        exp_luts.append(build_exp_lut(score_scale, lut_mode,
                                      lut_fraction_bits))
    concat_scale = max(hs.out for hs in head_scales)
    tables = SoftmaxTables(tuple(exp_luts), recip, denom_format)
    scales = ScaleSet(tuple(head_scales), concat_scale, 1.0)
    # stage 2: dry-run heads to calibrate the final W^O scale
    enc_cfg = cfg
    if cfg.mode == Mode.DECODER_ONLY:
        enc_cfg = AttentionConfig(cfg.n_tokens, cfg.d_model, cfg.n_heads,
                                  Mode.ENCODER_ONLY, cfg.flow, causal=True)
    head_outputs = []
    for h in range(cfg.n_heads):
        hs = scales.heads[h]
        q, k, v = _project_head(macro, x, x_kv, weights, h, hs)
        causal = enc_cfg.causal if x_kv is None else False
        out, _ = encoder_attention(macro, q, k, v, tables, enc_cfg, hs,
                                   head=h, causal=causal)
        head_outputs.append(out)
    concat = concat_heads(head_outputs, concat_scale)
    plan = make_mapping_plan(weights.wo.codes.shape[1],
                             weights.wo.codes.shape[0],
                             resident=("WO",), streamed="concat")
    acc = tiled_matmul(macro, plan,
                       QuantTensor(weights.wo.codes.T, weights.wo.scale),
                       QuantTensor(concat.codes.T, concat.scale))
    final_scale = _amax_scale(acc)
    return ScaleSet(tuple(head_scales), concat_scale, final_scale), tables
