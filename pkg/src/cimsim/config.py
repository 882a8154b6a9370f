"""Strict-schema JSON simulation config.

Unknown keys are rejected (silent typos corrupt experiment comparisons) and
every violation is reported with its field path.  The resolved config echoes
into every output report; paths are deliberately not part of the config (the
CLI carries them), so echoes are byte-stable across working directories.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .attention import AttentionConfig, Mode
from .fxp import FxpFormat
from .perf import CostModel, Pipeline, SparsityProfile
from .softmax import Flow


class ConfigError(ValueError):
    """Schema or invariant violation, reported with its field path."""


_MODES = {"encoder": Mode.ENCODER_ONLY, "decoder": Mode.DECODER_ONLY,
          "encoder_decoder": Mode.ENCODER_DECODER}
_FLOWS = {f.value: f for f in Flow}
_PIPELINES = {p.value: p for p in Pipeline}
_COST_FIELDS = {f.name for f in fields(CostModel)}


@dataclass(frozen=True)
class LutConfig:
    exp_mode: str = "fixed"
    exp_fraction_bits: int = 7
    recip_index_bits: int = 8
    recip_fraction_bits: int = 15
    denom_integer_bits: int = 8
    denom_fraction_bits: int = 24

    def denom_format(self):
        return FxpFormat(self.denom_integer_bits, self.denom_fraction_bits,
                         signed=False)


@dataclass(frozen=True)
class SimConfig:
    mode: str
    n_tokens: int
    d_model: int
    n_heads: int = 1
    flow: str = ""
    causal: bool = False
    seed: int = 0
    pipeline: str = "split_lut"
    luts: LutConfig = field(default_factory=LutConfig)
    cost_overrides: dict = field(default_factory=dict)
    sparsity: SparsityProfile = field(default_factory=SparsityProfile)

    def attention_config(self):
        return AttentionConfig(self.n_tokens, self.d_model, self.n_heads,
                               _MODES[self.mode], _FLOWS[self.flow],
                               causal=self.causal)

    def cost_model(self):
        return CostModel(**self.cost_overrides)

    def pipeline_enum(self):
        return _PIPELINES[self.pipeline]

    def to_dict(self):
        return {
            "mode": self.mode,
            "N": self.n_tokens,
            "d_model": self.d_model,
            "h": self.n_heads,
            "flow": self.flow,
            "causal": self.causal,
            "seed": self.seed,
            "pipeline": self.pipeline,
            "luts": asdict(self.luts),
            "cost_overrides": dict(self.cost_overrides),
            "sparsity": {
                "activation_sparsity": self.sparsity.activation_sparsity,
                "weight_sparsity": self.sparsity.weight_sparsity,
            },
        }


_MISSING = object()


def _expect(cond, path, message):
    if not cond:
        raise ConfigError(f"{path}: {message}")


def _take(data, key, default, path, kind):
    value = data.pop(key, _MISSING)
    if value is _MISSING:
        _expect(default is not None, f"{path}{key}", "required field missing")
        return default
    if kind is int:
        _expect(isinstance(value, int) and not isinstance(value, bool),
                f"{path}{key}", f"expected an integer, got {value!r}")
    elif kind is bool:
        _expect(isinstance(value, bool), f"{path}{key}",
                f"expected a boolean, got {value!r}")
    elif kind is float:
        _expect(isinstance(value, (int, float)) and not isinstance(value, bool),
                f"{path}{key}", f"expected a number, got {value!r}")
        value = float(value)
    elif kind is str:
        _expect(isinstance(value, str), f"{path}{key}",
                f"expected a string, got {value!r}")
    elif kind is dict:
        _expect(isinstance(value, dict), f"{path}{key}",
                f"expected an object, got {value!r}")
    return value


def config_from_dict(data, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a JSON object")
    data = dict(data)
    mode = _take(data, "mode", None, path, str)
    _expect(mode in _MODES, f"{path}mode",
            f"must be one of {sorted(_MODES)}, got {mode!r}")
    n = _take(data, "N", None, path, int)
    _expect(isinstance(n, int) and n >= 1, f"{path}N", f"must be >= 1, got {n!r}")
    d_model = _take(data, "d_model", None, path, int)
    _expect(isinstance(d_model, int) and d_model >= 1, f"{path}d_model",
            f"must be >= 1, got {d_model!r}")
    h = _take(data, "h", 1, path, int)
    _expect(h >= 1, f"{path}h", f"must be >= 1, got {h}")
    _expect(d_model % h == 0, f"{path}d_model,h",
            f"d_model {d_model} must be divisible by h {h}")
    default_flow = (Flow.DEFERRED_NORMALIZATION.value if mode == "decoder"
                    else Flow.NORMALIZE_THEN_MATMUL.value)
    flow = _take(data, "flow", default_flow, path, str)
    _expect(flow in _FLOWS, f"{path}flow",
            f"must be one of {sorted(_FLOWS)}, got {flow!r}")
    causal = _take(data, "causal", mode == "decoder", path, bool)
    _expect(not (mode == "decoder" and not causal), f"{path}causal",
            "decoder mode is always causal")
    seed = _take(data, "seed", 0, path, int)
    _expect(0 <= seed < 2**64, f"{path}seed", "must fit in 64 bits")
    pipeline = _take(data, "pipeline", "split_lut", path, str)
    _expect(pipeline in _PIPELINES, f"{path}pipeline",
            f"must be one of {sorted(_PIPELINES)}, got {pipeline!r}")

    luts_raw = _take(data, "luts", {}, path, dict)
    luts_raw = dict(luts_raw)
    exp_mode = _take(luts_raw, "exp_mode", "fixed", f"{path}luts.", str)
    _expect(exp_mode in ("fixed", "exact"), f"{path}luts.exp_mode",
            f"must be 'fixed' or 'exact', got {exp_mode!r}")
    exp_bits = _take(luts_raw, "exp_fraction_bits", 7, f"{path}luts.", int)
    _expect(1 <= exp_bits <= 15, f"{path}luts.exp_fraction_bits",
            f"must be in 1..15, got {exp_bits}")
    k_bits = _take(luts_raw, "recip_index_bits", 8, f"{path}luts.", int)
    _expect(4 <= k_bits <= 12, f"{path}luts.recip_index_bits",
            f"must be in 4..12, got {k_bits}")
    recip_bits = _take(luts_raw, "recip_fraction_bits", 15, f"{path}luts.", int)
    _expect(4 <= recip_bits <= 30, f"{path}luts.recip_fraction_bits",
            f"must be in 4..30, got {recip_bits}")
    den_i = _take(luts_raw, "denom_integer_bits", 8, f"{path}luts.", int)
    den_f = _take(luts_raw, "denom_fraction_bits", 24, f"{path}luts.", int)
    _expect(1 <= den_i and 1 <= den_f and den_i + den_f <= 64,
            f"{path}luts.denom_integer_bits",
            "denominator format must fit in 64 bits")
    _reject_unknown(luts_raw, f"{path}luts.")
    luts = LutConfig(exp_mode, exp_bits, k_bits, recip_bits, den_i, den_f)

    cost_raw = _take(data, "cost_overrides", {}, path, dict)
    cost_raw = dict(cost_raw)
    for key, value in cost_raw.items():
        _expect(key in _COST_FIELDS, f"{path}cost_overrides.{key}",
                f"unknown cost entry (known: {sorted(_COST_FIELDS)})")
        _expect(isinstance(value, (int, float)) and not isinstance(value, bool),
                f"{path}cost_overrides.{key}", f"expected a number, got {value!r}")
    cost_overrides = {k: (float(v) if k == "frequency_mhz" else int(v))
                      for k, v in cost_raw.items()}

    sp_raw = _take(data, "sparsity", {}, path, dict)
    sp_raw = dict(sp_raw)
    act = _take(sp_raw, "activation_sparsity", 0.0, f"{path}sparsity.", float)
    wgt = _take(sp_raw, "weight_sparsity", 0.0, f"{path}sparsity.", float)
    _reject_unknown(sp_raw, f"{path}sparsity.")
    for name, v in (("activation_sparsity", act), ("weight_sparsity", wgt)):
        _expect(0.0 <= v <= 1.0, f"{path}sparsity.{name}",
                f"must be in [0, 1], got {v}")
    sparsity = SparsityProfile(act, wgt)

    _reject_unknown(data, path)
    cfg = SimConfig(mode=mode, n_tokens=n, d_model=d_model, n_heads=h,
                    flow=flow, causal=causal, seed=seed, pipeline=pipeline,
                    luts=luts, cost_overrides=cost_overrides,
                    sparsity=sparsity)
    cfg.cost_model()  # validates the overrides against CostModel invariants
    cfg.attention_config()
    return cfg


def _reject_unknown(data, path):
    if data:
        key = sorted(data)[0]
        raise ConfigError(f"{path}{key}: unknown key")


def load_config(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def dump_json(obj, path=None):
    """Deterministic JSON serialization (sorted keys, fixed layout)."""
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
