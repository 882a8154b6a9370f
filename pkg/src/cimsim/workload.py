"""Deterministic workload bundles.

Generator: numpy ``default_rng`` (PCG64) seeded with ``[seed, stream_id]``
where stream ids follow the tensor order X, then per head Wq, Wk, Wv, then
Wo.  Codes are drawn uniformly over the full int8 range; the input scale is
1/127 (values in [-1, 1]) and weight scales are 2/(127*sqrt(d_model)) so
projected activations stay O(1) before calibration.  Identical seed+config
produce byte-identical bundles.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .attention import AttentionWeights
from .config import config_from_dict, dump_json
from .container import read_tensor, write_tensor
from .fxp import QuantTensor

X_SCALE = 1.0 / 127.0


def _rng(seed, stream):
    return np.random.default_rng([seed, stream])


def _codes(rng, shape):
    return rng.integers(-128, 128, size=shape, dtype=np.int16).astype(np.int8)


def generate_workload(seed, cfg):
    """Pseudo-random int8 tensors for one attention workload."""
    acfg = cfg.attention_config()
    n, dm, dh = acfg.n_tokens, acfg.d_model, acfg.d_head
    w_scale = 2.0 / (127.0 * np.sqrt(dm))
    stream = 0
    x = QuantTensor(_codes(_rng(seed, stream), (n, dm)), X_SCALE)
    wq, wk, wv = [], [], []
    for _ in range(acfg.n_heads):
        for dest in (wq, wk, wv):
            stream += 1
            dest.append(QuantTensor(_codes(_rng(seed, stream), (dm, dh)),
                                    w_scale))
    stream += 1
    wo = QuantTensor(_codes(_rng(seed, stream), (dm, dm)), w_scale)
    return x, AttentionWeights(tuple(wq), tuple(wk), tuple(wv), wo)


def save_workload(out_dir, cfg, x, weights):
    os.makedirs(out_dir, exist_ok=True)
    dump_json(cfg.to_dict(), os.path.join(out_dir, "config.json"))
    write_tensor(os.path.join(out_dir, "X.cimt"), x.codes, x.scale)
    for h in range(len(weights.wq)):
        for name, group in (("Wq", weights.wq), ("Wk", weights.wk),
                            ("Wv", weights.wv)):
            t = group[h]
            write_tensor(os.path.join(out_dir, f"{name}.h{h}.cimt"),
                         t.codes, t.scale)
    write_tensor(os.path.join(out_dir, "Wo.cimt"), weights.wo.codes,
                 weights.wo.scale)


def load_workload(bundle_dir):
    with open(os.path.join(bundle_dir, "config.json")) as fh:
        cfg = config_from_dict(json.load(fh))
    x_codes, x_scale, _ = read_tensor(os.path.join(bundle_dir, "X.cimt"))
    x = QuantTensor(x_codes, x_scale)
    wq, wk, wv = [], [], []
    for h in range(cfg.n_heads):
        for name, dest in (("Wq", wq), ("Wk", wk), ("Wv", wv)):
            codes, scale, _ = read_tensor(
                os.path.join(bundle_dir, f"{name}.h{h}.cimt"))
            dest.append(QuantTensor(codes, scale))
    wo_codes, wo_scale, _ = read_tensor(os.path.join(bundle_dir, "Wo.cimt"))
    return cfg, x, AttentionWeights(tuple(wq), tuple(wk), tuple(wv),
                                    QuantTensor(wo_codes, wo_scale))
