"""Cycle-level scheduling and op-count accounting.

Two schedules share one row-granular interval machinery:

* ``NON_SPLIT_BASELINE`` serializes the activation-to-activation stages per
  head: all scores are produced, written back at full 32-bit width, then the
  softmax unit makes its three dependent read passes (max scan, exponential
  accumulate, normalize) over every row, then the A'V matmul runs.  The three
  pass engines pipeline across rows at the buffer port bandwidth.
* ``SPLIT_LUT`` streams each score row through the quantizer and the exp
  table as it is produced, accumulates the denominator on the fly, and lets
  the A'V phase start as soon as the first row's normalizer is ready, so the
  softmax cost hides under the matmul phases except for the per-row
  reciprocal drain.

Both schedules describe the same arithmetic; only the CycleReport differs.
The interval trace doubles as the event log for pipeline-soundness checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum

from . import cim_core


class PerfError(ValueError):
    """Inconsistent workload shape or cost model."""


class Pipeline(Enum):
    SPLIT_LUT = "split_lut"
    NON_SPLIT_BASELINE = "non_split_baseline"


@dataclass(frozen=True)
class CostModel:
    """Published default cost ledger; these are the only free parameters in
    the latency comparison.  Widths are in bits, everything else in cycles
    (``*_per_cycle`` entries are throughputs)."""

    cycles_per_matvec: int = 8
    write_beats_per_row: int = 4
    softmax_lut_read: int = 1
    lut_reads_per_cycle: int = 4       # exp table ports match the quantizer output rate
    nonsplit_softmax_read_passes: int = 3
    nonsplit_input_width: int = 32
    softmax_port_bits: int = 128       # buffer port feeding the baseline softmax unit
    quantize_cycles: int = 1
    recip_normalize_cycles: int = 1
    partitions: int = cim_core.PARTITIONS
    lanes: int = cim_core.LANES
    frequency_mhz: float = 400.0       # informational only

    def __post_init__(self):
        for f in fields(self):
            if f.name == "frequency_mhz":
                continue
            if getattr(self, f.name) < 1:
                raise PerfError(f"cost entry {f.name} must be >= 1")

    def assumptions(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class SparsityProfile:
    activation_sparsity: float = 0.0
    weight_sparsity: float = 0.0

    def __post_init__(self):
        for name in ("activation_sparsity", "weight_sparsity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise PerfError(f"{name} must be in [0, 1], got {v}")


@dataclass
class CycleReport:
    pipeline: str
    stage_cycles: dict
    total_latency_cycles: int
    a2a_latency_cycles: int
    pipeline_overlap_cycles: int
    op_counts: dict
    utilization: float
    assumptions: dict
    intervals: list = field(default_factory=list)

    def __post_init__(self):
        total_stages = sum(self.stage_cycles.values())
        if self.total_latency_cycles > total_stages:
            raise PerfError("total exceeds the sum of stage cycles")
        if self.total_latency_cycles < max(self.stage_cycles.values()):
            raise PerfError("total below the critical-path stage")

    def to_dict(self):
        return {
            "pipeline": self.pipeline,
            "stage_cycles": dict(self.stage_cycles),
            "total_latency_cycles": self.total_latency_cycles,
            "a2a_latency_cycles": self.a2a_latency_cycles,
            "pipeline_overlap_cycles": self.pipeline_overlap_cycles,
            "op_counts": dict(self.op_counts),
            "utilization": self.utilization,
            "assumptions": dict(self.assumptions),
        }


def _row_cycles(dots, costs):
    return -(-dots // costs.partitions) * costs.cycles_per_matvec


def _a2a_intervals(n_tokens, d_head, costs, pipeline, causal):
    """Row-granular interval trace of the activation-to-activation stage for
    one head.  Returns (intervals, totals dict)."""
    lanes = costs.lanes
    chunks_d = -(-d_head // lanes)
    fill = costs.write_beats_per_row * min(costs.partitions, n_tokens * chunks_d)
    intervals = []

    def row_len(i):
        return (i + 1) if causal else n_tokens

    # score production (Q resident, K^T streamed)
    qk_done = []
    t = fill
    for i in range(n_tokens):
        dur = _row_cycles(row_len(i) * chunks_d, costs)
        intervals.append(("qkT_row", i, t, t + dur))
        t += dur
        qk_done.append(t)
    qk_total = t - fill

    av_rows = [_row_cycles(d_head * -(-row_len(i) // lanes), costs)
               for i in range(n_tokens)]
    av_total = sum(av_rows)

    if pipeline == Pipeline.NON_SPLIT_BASELINE:
        # stage-serialized: softmax starts only after every score is ready;
        # its three pass engines pipeline across rows at the port bandwidth
        passes = costs.nonsplit_softmax_read_passes
        t_pass = [max(1, -(-row_len(i) * costs.nonsplit_input_width
                           // costs.softmax_port_bits))
                  for i in range(n_tokens)]
        s_start = qk_done[-1]
        engine_free = [s_start] * passes
        soft_done = []
        for i in range(n_tokens):
            t_in = s_start
            for p in range(passes):
                t_in = max(engine_free[p], t_in) + t_pass[i]
                engine_free[p] = t_in
            intervals.append(("softmax_row", i, t_in - passes * t_pass[i], t_in))
            soft_done.append(t_in)
        # the probability narrowing to 8b belongs to the softmax stage
        softmax_total = soft_done[-1] - s_start + costs.quantize_cycles
        t = soft_done[-1] + costs.quantize_cycles
        for i in range(n_tokens):
            intervals.append(("av_row", i, t, t + av_rows[i]))
            t += av_rows[i]
        total = t + costs.quantize_cycles  # output write-back quantization
    else:
        # split: exp lookups trail score production; recip finalize per row;
        # A'V rows run on the core after the score phase, stalling only if a
        # row's normalizer is not ready yet
        lut_end = 0
        soft_done = []
        for i in range(n_tokens):
            ready = qk_done[i] + costs.quantize_cycles
            lut_end = max(ready + costs.softmax_lut_read,
                          lut_end + -(-row_len(i) * costs.softmax_lut_read
                                      // costs.lut_reads_per_cycle))
            done = lut_end + costs.softmax_lut_read + costs.recip_normalize_cycles
            intervals.append(("softmax_row", i, qk_done[i], done))
            soft_done.append(done)
        # standalone serial cost of the split softmax stage: per row, the exp
        # stream (throughput- or latency-bound) plus the reciprocal finalize
        softmax_total = costs.quantize_cycles + sum(
            max(-(-row_len(i) * costs.softmax_lut_read
                  // costs.lut_reads_per_cycle), costs.softmax_lut_read)
            + costs.softmax_lut_read + costs.recip_normalize_cycles
            for i in range(n_tokens)
        )
        t = qk_done[-1]
        for i in range(n_tokens):
            start = max(t, soft_done[i])
            intervals.append(("av_row", i, start, start + av_rows[i]))
            t = start + av_rows[i]
        total = t + costs.quantize_cycles  # output write-back quantization
    totals = {
        "fill": fill,
        "qkT": qk_total,
        "softmax": softmax_total,
        "aV": av_total,
        "quantize": costs.quantize_cycles,
        "a2a_total": total,
    }
    return intervals, totals


def check_pipeline_soundness(intervals):
    """No consumer interval may start before its producer finishes streaming:
    softmax_row[i] must not end before qkT_row[i] ends, and av_row[i] must
    not start before softmax_row[i] ends (split) / the softmax stage ends."""
    by_kind = {}
    for kind, idx, start, end in intervals:
        if end < start:
            raise PerfError(f"interval {kind}[{idx}] ends before it starts")
        by_kind[(kind, idx)] = (start, end)
    for (kind, idx), (start, end) in by_kind.items():
        if kind == "softmax_row":
            qk = by_kind.get(("qkT_row", idx))
            if qk and end < qk[1]:
                raise PerfError(f"softmax_row[{idx}] ends before its scores exist")
        if kind == "av_row":
            sm = by_kind.get(("softmax_row", idx))
            if sm and start < sm[1]:
                raise PerfError(f"av_row[{idx}] consumes a normalizer before it exists")
    return True


def schedule_attention(cfg, plan, costs, pipeline):
    """Cycle schedule for one attention layer; returns a CycleReport.

    The weight projection and concatenation stages are identical in both
    pipelines; the comparison lives in the activation-to-activation stage.
    """
    n = cfg.n_tokens
    d_head = cfg.d_head
    d_model = cfg.d_model
    h = cfg.n_heads
    proj = 3 * h * _row_cycles(n * d_head * -(-d_model // costs.lanes), costs)
    concat = _row_cycles(n * d_model * -(-d_model // costs.lanes), costs)

    intervals = []
    a2a_total = 0
    stage = {"fill": 0, "qkT": 0, "softmax": 0, "aV": 0, "quantize": 0}
    for _ in range(h):
        head_intervals, totals = _a2a_intervals(n, d_head, costs, pipeline,
                                                cfg.causal)
        intervals = head_intervals  # identical per head; keep one trace
        a2a_total += totals["a2a_total"]
        for key in stage:
            stage[key] += totals[key]
    check_pipeline_soundness(intervals)

    counts = count_ops(cfg, SparsityProfile())
    op_counts = {
        "multiplies": counts["dense"]["total"] // 2,
        "adds": counts["dense"]["total"] // 2,
        "lut_reads": counts["lut_reads"]["total"],
    }
    stage_cycles = {
        "weight_projection": proj,
        "qkT": stage["fill"] + stage["qkT"],
        "softmax": stage["softmax"],
        "aV": stage["aV"] + stage["quantize"],
        "concat": concat,
    }
    total = proj + a2a_total + concat
    overlap = sum(stage_cycles.values()) - total
    core_busy = proj + stage["qkT"] + stage["aV"] + concat
    return CycleReport(
        pipeline=pipeline.value,
        stage_cycles=stage_cycles,
        total_latency_cycles=total,
        a2a_latency_cycles=a2a_total,
        pipeline_overlap_cycles=overlap,
        op_counts=op_counts,
        utilization=core_busy / total if total else 0.0,
        assumptions=costs.assumptions(),
        intervals=intervals,
    )


def count_ops(cfg, sparsity):
    """Dense and sparsity-scaled op counts (1 op = 1 addition or multiply).

    Activation sparsity scales the activation-to-activation terms; weight
    sparsity scales the weight-stationary projection terms.  LUT reads are
    counted separately (one exp read per score, one reciprocal per row).
    """
    n = cfg.n_tokens
    d_head = cfg.d_head
    d_model = cfg.d_model
    h = cfg.n_heads
    qkt = 2 * n * n * d_head * h
    av = 2 * n * n * d_head * h
    proj = 3 * 2 * n * d_model * d_model
    concat = 2 * n * d_model * d_model
    dense = {"qkT": qkt, "aV": av, "projection": proj, "concat": concat,
             "activation_dependent": qkt + av,
             "weight_stationary": proj + concat,
             "total": qkt + av + proj + concat}
    act = 1.0 - sparsity.activation_sparsity
    wgt = 1.0 - sparsity.weight_sparsity
    effective = {
        "qkT": qkt * act,
        "aV": av * act,
        "projection": proj * wgt,
        "concat": concat * wgt,
        "activation_dependent": (qkt + av) * act,
        "weight_stationary": (proj + concat) * wgt,
    }
    effective["total"] = (effective["activation_dependent"]
                          + effective["weight_stationary"])
    lut = {"exp": h * n * n, "recip": h * n, "total": h * n * n + h * n}
    return {"dense": dense, "effective": effective, "lut_reads": lut}


DEFAULT_ENERGY_COSTS = {"activation_mac": 1.0, "weight_mac": 1.0, "lut_read": 1.0}


def efficiency_proxy(counts, energy_costs=None):
    """Relative efficiency proxies from op counts (absolute TOPS/W is out of
    scope; only trend shapes are comparable).

    proxy_energy charges each op class its per-op cost on the *effective*
    (sparsity-reduced) counts; efficiency = dense ops per unit proxy energy,
    so it grows as sparsity removes work.
    """
    costs = dict(DEFAULT_ENERGY_COSTS)
    if energy_costs:
        costs.update(energy_costs)
    for name, value in costs.items():
        if value < 0:
            raise PerfError(f"energy cost {name} must be non-negative")
    dense = counts["dense"]
    eff = counts["effective"]
    lut = counts["lut_reads"]
    proxy_energy = (eff["activation_dependent"] * costs["activation_mac"]
                    + eff["weight_stationary"] * costs["weight_mac"]
                    + lut["total"] * costs["lut_read"])
    act_energy = eff["activation_dependent"] * costs["activation_mac"]
    result = {
        "proxy_energy": proxy_energy,
        "dense_ops_per_proxy_energy": (dense["total"] / proxy_energy
                                       if proxy_energy > 0 else math.inf),
        "activation_efficiency": (dense["activation_dependent"] / act_energy
                                  if act_energy > 0 else math.inf),
        "effective_ops": eff["total"],
    }
    return result


def latency_comparison(cfg, plan, costs):
    """Paired split/baseline schedules plus the reduction headline and a
    sensitivity sweep over each cost-ledger entry."""
    split = schedule_attention(cfg, plan, costs, Pipeline.SPLIT_LUT)
    base = schedule_attention(cfg, plan, costs, Pipeline.NON_SPLIT_BASELINE)
    saving = base.a2a_latency_cycles - split.a2a_latency_cycles
    reduction = saving / base.a2a_latency_cycles if base.a2a_latency_cycles else 0.0
    sensitivity = []
    sweeps = {
        "nonsplit_softmax_read_passes": [2, 4],
        "nonsplit_input_width": [16, 64],
        "softmax_port_bits": [64, 256],
        "lut_reads_per_cycle": [1, 2, 8],
        "softmax_lut_read": [2],
        "quantize_cycles": [2],
        "recip_normalize_cycles": [2],
    }
    for name, values in sweeps.items():
        for value in values:
            varied = replace(costs, **{name: value})
            s = schedule_attention(cfg, plan, varied, Pipeline.SPLIT_LUT)
            b = schedule_attention(cfg, plan, varied, Pipeline.NON_SPLIT_BASELINE)
            sv = b.a2a_latency_cycles - s.a2a_latency_cycles
            sensitivity.append({
                "parameter": name,
                "value": value,
                "reduction": sv / b.a2a_latency_cycles,
                "saving_cycles": sv,
                "nonsplit_softmax_stage_cycles": b.stage_cycles["softmax"],
                "saving_within_softmax_share": sv <= b.stage_cycles["softmax"],
            })
    return {
        "split": split.to_dict(),
        "non_split": base.to_dict(),
        "saving_cycles": saving,
        "reduction": reduction,
        "nonsplit_softmax_stage_cycles": base.stage_cycles["softmax"],
        "saving_within_softmax_share": saving <= base.stage_cycles["softmax"],
        "sensitivity": sensitivity,
    }
