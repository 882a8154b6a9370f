"""End-to-end simulation runs, oracle comparisons, and report emission.

Exit-code contract: 0 when every invariant check and error budget passes,
2 for configuration errors, 3 for a numeric budget violation, 4 for an
invariant violation.  Every report embeds the resolved config echo and the
cost-model assumption ledger, and contains no volatile data (paths, clocks),
so identical config+seed runs produce byte-identical bundles.
"""

from __future__ import annotations

import os

import numpy as np

from . import oracles
from .attention import (
    AttentionConfig,
    KvCache,
    Mode,
    calibrate_scales,
    decoder_step,
    make_mapping_plan,
    multi_head_attention,
    project_qkv,
    score_codes_for_head,
    encoder_attention,
)
from .budget import attention_layer_budget, softmax_pipeline_budget
from .cim_core import CimMacro, EventLog, tiled_matmul
from .config import dump_json
from .container import read_tensor, write_tensor
from .fxp import QuantTensor
from .perf import Pipeline, schedule_attention
from .softmax import build_exp_lut, build_recip_lut, normalize_terms, split_softmax_row

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BUDGET = 3
EXIT_INVARIANT = 4

ARGMAX_GAP = 2.0 / 127.0


def _calibrate(macro, cfg, x, weights, x_kv=None, causal=None, mode=None):
    acfg = cfg.attention_config()
    if causal is not None or mode is not None:
        acfg = AttentionConfig(acfg.n_tokens, acfg.d_model, acfg.n_heads,
                               mode or acfg.mode, acfg.flow,
                               causal=acfg.causal if causal is None else causal)
    scales, tables = calibrate_scales(
        macro, x, weights, acfg,
        lut_fraction_bits=cfg.luts.exp_fraction_bits,
        recip_index_bits=cfg.luts.recip_index_bits,
        recip_fraction_bits=cfg.luts.recip_fraction_bits,
        lut_mode=cfg.luts.exp_mode,
        denom_format=cfg.luts.denom_format(),
        x_kv=x_kv,
    )
    return acfg, scales, tables


def _weight_maxima(weights):
    return {
        "wq": max(float(np.max(np.abs(w.dequantize()))) for w in weights.wq),
        "wk": max(float(np.max(np.abs(w.dequantize()))) for w in weights.wk),
        "wv": max(float(np.max(np.abs(w.dequantize()))) for w in weights.wv),
        "wo": float(np.max(np.abs(weights.wo.dequantize()))),
    }


def softmax_stage_metrics(macro, x, weights, acfg, scales, tables, x_kv=None):
    """Per-head softmax metrics: fixed-pipeline probabilities against the
    stable float softmax of the same dequantized score rows, gated by the
    per-row analytic budget (denominator-aware)."""
    per_head = []
    all_pass = True
    for h in range(acfg.n_heads):
        hs = scales.heads[h]
        q, _, _ = project_qkv(macro, x, weights.wq[h], weights.wk[h],
                              weights.wv[h], out_scales=(hs.q, hs.k, hs.v))
        src = x if x_kv is None else x_kv
        _, k, _ = project_qkv(macro, src, weights.wq[h], weights.wk[h],
                              weights.wv[h], out_scales=(hs.q, hs.k, hs.v))
        scores = score_codes_for_head(macro, q, k, acfg, hs)
        exp_lut = tables.exp_luts[h]
        max_err = 0.0
        sum_err = 0.0
        count = 0
        row_sum_devs = []
        agree = 0
        gap_rows = 0
        budget_max = 0.0
        rows_pass = True
        causal = acfg.causal and x_kv is None
        for i in range(scores.codes.shape[0]):
            limit = i + 1 if causal else scores.codes.shape[1]
            row = scores.codes[i, :limit]
            terms, normalizer, state = split_softmax_row(
                row, exp_lut, tables.recip, denom_format=tables.denom_format)
            probs = normalize_terms(normalizer, terms)
            if exp_lut.mode == "fixed":
                probs_f = probs.astype(np.float64) / exp_lut.max_code
            else:
                probs_f = probs
            ref = oracles.safe_softmax(row.astype(np.float64) * scores.scale)
            err = np.abs(probs_f - ref)
            row_budget = softmax_pipeline_budget(
                limit, state.denominator_value, exp_lut.max_code,
                tables.recip.index_bits, tables.recip.fraction_bits,
                tables.denom_format.fraction_bits,
            ) if exp_lut.mode == "fixed" else 1e-9
            budget_max = max(budget_max, row_budget)
            if float(err.max()) > row_budget:
                rows_pass = False
            max_err = max(max_err, float(err.max()))
            sum_err += float(err.sum())
            count += err.size
            row_sum_devs.append(abs(float(probs_f.sum()) - 1.0))
            top = np.sort(ref)[::-1]
            if limit == 1 or (top[0] - top[1]) > ARGMAX_GAP:
                gap_rows += 1
                if int(np.argmax(probs_f)) == int(np.argmax(ref)):
                    agree += 1
        all_pass = all_pass and rows_pass
        per_head.append({
            "head": h,
            "max_abs_error": max_err,
            "mean_abs_error": sum_err / count if count else 0.0,
            "row_sum_deviation_max": max(row_sum_devs),
            "row_sum_deviation_mean": sum(row_sum_devs) / len(row_sum_devs),
            "argmax_agreement_rate": agree / gap_rows if gap_rows else 1.0,
            "budget_max": budget_max,
            "within_budget": rows_pass,
        })
    return per_head, all_pass


def run_simulation(cfg, x, weights, out_dir, event_log=False):
    """Execute the configured mapping end to end; returns (exit_code, report)."""
    os.makedirs(out_dir, exist_ok=True)
    log = EventLog() if event_log else None
    macro = CimMacro(log)
    invariant_failures = []
    budget_failures = []

    x_f = x.dequantize()
    wq_f = [w.dequantize() for w in weights.wq]
    wk_f = [w.dequantize() for w in weights.wk]
    wv_f = [w.dequantize() for w in weights.wv]
    wo_f = weights.wo.dequantize()
    w_max = _weight_maxima(weights)

    if cfg.mode == "encoder_decoder":
        enc_cfg, enc_scales, enc_tables = _calibrate(
            macro, cfg, x, weights, causal=False, mode=Mode.ENCODER_ONLY)
        enc_out, _, enc_stats = multi_head_attention(
            macro, x, weights, enc_tables, enc_cfg, enc_scales)
        dec_cfg, dec_scales, dec_tables = _calibrate(
            macro, cfg, x, weights, causal=True, mode=Mode.ENCODER_ONLY)
        hidden, _, dec_stats = multi_head_attention(
            macro, x, weights, dec_tables, dec_cfg, dec_scales)
        cross_cfg, cross_scales, cross_tables = _calibrate(
            macro, cfg, hidden, weights, x_kv=enc_out, causal=False,
            mode=Mode.ENCODER_ONLY)
        out, head_outputs, cross_stats = multi_head_attention(
            macro, hidden, weights, cross_tables, cross_cfg, cross_scales,
            x_kv=enc_out)
        oracle_out = oracles.encoder_decoder_attention(x_f, wq_f, wk_f, wv_f,
                                                       wo_f)
        e_enc = attention_layer_budget(enc_cfg, enc_scales, enc_tables,
                                       enc_stats, w_max=w_max)["final"]
        e_dec = attention_layer_budget(dec_cfg, dec_scales, dec_tables,
                                       dec_stats, w_max=w_max)["final"]
        bud = attention_layer_budget(cross_cfg, cross_scales, cross_tables,
                                     cross_stats, e_q_in=e_dec,
                                     e_kv_in=e_enc, w_max=w_max)
        acfg, scales, tables = cross_cfg, cross_scales, cross_tables
        head_stats = cross_stats
        softmax_metrics, softmax_pass = softmax_stage_metrics(
            macro, hidden, weights, cross_cfg, cross_scales, cross_tables,
            x_kv=enc_out)
    else:
        acfg, scales, tables = _calibrate(macro, cfg, x, weights)
        out, head_outputs, head_stats = multi_head_attention(
            macro, x, weights, tables, acfg, scales)
        oracle_out = oracles.multi_head_attention(x_f, wq_f, wk_f, wv_f, wo_f,
                                                  causal=acfg.causal)
        bud = attention_layer_budget(acfg, scales, tables, head_stats,
                                     w_max=w_max)
        softmax_metrics, softmax_pass = softmax_stage_metrics(
            macro, x, weights, acfg, scales, tables)

    if not softmax_pass:
        budget_failures.append("softmax stage exceeded its per-row budget")

    measured = np.abs(out.dequantize() - oracle_out)
    attn_report = {
        "max_abs_error": float(measured.max()),
        "mean_abs_error": float(measured.mean()),
        "budget": bud["final"],
        "within_budget": bool(measured.max() <= bud["final"]),
    }
    if not attn_report["within_budget"]:
        budget_failures.append("attention output exceeded the analytic budget")

    replay = None
    if cfg.mode == "decoder":
        replay_ok = _decoder_replay_matches(macro, x, weights, acfg, scales,
                                            tables)
        replay = {"bit_exact_vs_causal_encoder": replay_ok}
        if not replay_ok:
            invariant_failures.append(
                "decoder replay differs from causal encoder attention")

    costs = cfg.cost_model()
    plan = make_mapping_plan(acfg.n_tokens, acfg.d_head)
    cycle_report = schedule_attention(acfg, plan, costs,
                                      cfg.pipeline_enum()).to_dict()

    diagnostics = {
        "underflow_fallbacks": sum(s["underflow_fallbacks"] for s in head_stats),
        "denominator_saturations": sum(s["denominator_saturations"]
                                       for s in head_stats),
    }
    status_checks = {
        "budget_failures": budget_failures,
        "invariant_failures": invariant_failures,
    }
    status = "PASS" if not budget_failures and not invariant_failures else "FAILED"
    error_report = {
        "status": status,
        "attention_output": attn_report,
        "softmax_stage": softmax_metrics,
        "per_head_budgets": bud["per_head"],
        "diagnostics": diagnostics,
        "decoder_replay": replay,
        "checks": status_checks,
        "config_echo": cfg.to_dict(),
        "assumptions": costs.assumptions(),
    }

    write_tensor(os.path.join(out_dir, "out.cimt"), out.codes, out.scale)
    for h, head_out in enumerate(head_outputs):
        write_tensor(os.path.join(out_dir, f"attn.h{h}.cimt"),
                     head_out.codes, head_out.scale)
    dump_json(error_report, os.path.join(out_dir, "error_report.json"))
    cycle_report["config_echo"] = cfg.to_dict()
    dump_json(cycle_report, os.path.join(out_dir, "cycle_report.json"))
    if log is not None:
        log.dump(os.path.join(out_dir, "events.log"))

    if invariant_failures:
        return EXIT_INVARIANT, error_report
    if budget_failures:
        return EXIT_BUDGET, error_report
    return EXIT_OK, error_report


def _decoder_replay_matches(macro, x, weights, acfg, scales, tables):
    """Replay the sequence through decoder_step + KvCache and compare bit
    for bit with causal encoder attention under the same scales and flow."""
    enc_cfg = AttentionConfig(acfg.n_tokens, acfg.d_model, acfg.n_heads,
                              Mode.ENCODER_ONLY, acfg.flow, causal=True)
    for h in range(acfg.n_heads):
        hs = scales.heads[h]
        q, k, v = project_qkv(macro, x, weights.wq[h], weights.wk[h],
                              weights.wv[h], out_scales=(hs.q, hs.k, hs.v))
        enc_out, _ = encoder_attention(macro, q, k, v, tables, enc_cfg, hs,
                                       head=h)
        cache = KvCache(acfg.n_heads)
        rows = []
        for t in range(acfg.n_tokens):
            step_out, _ = decoder_step(
                macro,
                QuantTensor(q.codes[t:t + 1], q.scale),
                QuantTensor(k.codes[t:t + 1], k.scale),
                QuantTensor(v.codes[t:t + 1], v.scale),
                cache, tables, acfg, hs, head=h,
            )
            rows.append(step_out.codes)
        dec_out = np.vstack(rows)
        if not np.array_equal(dec_out, enc_out.codes):
            return False
    return True


def compare_bundle(out_dir, oracle_name, cfg, x, weights):
    """Compare a run's outputs against one of the independent oracles.

    IntegerGemm re-derives every projection accumulator and demands exact
    equality; SafeSoftmax checks exact-mode split softmax on the run's score
    rows at 1e-9; FloatAttention recomputes the pipeline and checks the
    stored output tensor against the float oracle within the analytic
    budget.  Returns (exit_code, report).
    """
    macro = CimMacro()
    report = {"oracle": oracle_name, "config_echo": cfg.to_dict()}
    if oracle_name == "IntegerGemm":
        max_err = 0
        for h in range(cfg.n_heads):
            for w in (weights.wq[h], weights.wk[h], weights.wv[h]):
                ref = oracles.integer_gemm(x.codes, w.codes)
                w_t = QuantTensor(w.codes.T, w.scale)
                x_t = QuantTensor(x.codes.T, x.scale)
                plan = make_mapping_plan(w_t.codes.shape[0],
                                         w_t.codes.shape[1])
                acc = tiled_matmul(macro, plan, w_t, x_t)
                max_err = max(max_err,
                              int(np.max(np.abs(acc.values.T - ref))))
        report.update({"max_abs_error": max_err, "budget": 0,
                       "within_budget": max_err == 0})
    elif oracle_name == "SafeSoftmax":
        acfg, scales, tables = _calibrate(macro, cfg, x, weights)
        max_err = 0.0
        for h in range(acfg.n_heads):
            hs = scales.heads[h]
            q, k, v = project_qkv(macro, x, weights.wq[h], weights.wk[h],
                                  weights.wv[h],
                                  out_scales=(hs.q, hs.k, hs.v))
            scores = score_codes_for_head(macro, q, k, acfg, hs)
            exact_lut = build_exp_lut(hs.score, "exact")
            recip = build_recip_lut(cfg.luts.recip_index_bits, "exact")
            for i in range(scores.codes.shape[0]):
                limit = i + 1 if acfg.causal else scores.codes.shape[1]
                row = scores.codes[i, :limit]
                terms, normalizer, _ = split_softmax_row(row, exact_lut, recip)
                probs = normalize_terms(normalizer, terms)
                ref = oracles.safe_softmax(row.astype(np.float64) * hs.score)
                max_err = max(max_err, float(np.max(np.abs(probs - ref))))
        report.update({"max_abs_error": max_err, "budget": 1e-9,
                       "within_budget": max_err <= 1e-9})
    elif oracle_name == "FloatAttention":
        out_path = os.path.join(out_dir, "out.cimt")
        stored = None
        if os.path.exists(out_path):
            stored, _, _ = read_tensor(out_path)
        code, run_report = run_simulation(cfg, x, weights, out_dir)
        recomputed, _, _ = read_tensor(out_path)
        report.update(run_report["attention_output"])
        if stored is not None:
            report["stored_output_consistent"] = bool(
                np.array_equal(stored, recomputed))
        report["within_budget"] = (report["within_budget"]
                                   and code != EXIT_BUDGET)
    else:
        raise ValueError(f"unknown oracle {oracle_name!r} "
                         "(known: FloatAttention, IntegerGemm, SafeSoftmax)")
    exit_code = EXIT_OK if report["within_budget"] else EXIT_BUDGET
    dump_json(report, os.path.join(out_dir, f"compare_{oracle_name}.json"))
    return exit_code, report


def timing_value_separation(cfg, x, weights):
    """Run both schedules; outputs must be byte-identical while the cycle
    reports differ.  Returns (identical_outputs, reports_differ)."""
    outs = []
    reports = []
    for pipeline in (Pipeline.SPLIT_LUT, Pipeline.NON_SPLIT_BASELINE):
        macro = CimMacro()
        acfg, scales, tables = _calibrate(macro, cfg, x, weights)
        out, _, _ = multi_head_attention(macro, x, weights, tables, acfg,
                                         scales)
        plan = make_mapping_plan(acfg.n_tokens, acfg.d_head)
        reports.append(schedule_attention(acfg, plan, cfg.cost_model(),
                                          pipeline))
        outs.append((out.codes.tobytes(), out.scale))
    identical = outs[0] == outs[1]
    differ = (reports[0].total_latency_cycles
              != reports[1].total_latency_cycles)
    return identical, differ
