"""Independent brute-force oracles for the comparison harness.

These deliberately share no arithmetic helpers with the simulator modules:
everything here is plain float64 / wide-integer numpy, written from the
textbook definitions, so a simulator bug cannot hide in a shared routine.
Inputs are raw arrays (codes or dequantized reals), never simulator types.
"""

from __future__ import annotations

import math

import numpy as np


def integer_gemm(a_codes, b_codes):
    """Exact wide-integer matrix product of two code matrices."""
    a = np.asarray(a_codes, dtype=np.int64)
    b = np.asarray(b_codes, dtype=np.int64)
    return a @ b


def safe_softmax(z):
    """Row-stable softmax of a 1-D or 2-D array, float64."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        e = np.exp(z - z.max())
        return e / e.sum()
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_head(q, k, v, causal=False):
    """Float reference attention for one head: softmax(q k^T / sqrt(d)) v."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    scores = q @ k.T / math.sqrt(q.shape[1])
    out = np.empty((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        limit = i + 1 if causal else k.shape[0]
        probs = safe_softmax(scores[i, :limit])
        out[i] = probs @ v[:limit]
    return out


def multi_head_attention(x, wq, wk, wv, wo, causal=False, x_kv=None):
    """Float reference multi-head attention.

    x is (N, d_model); wq/wk/wv are per-head (d_model, d_head) arrays; wo is
    (d_model, d_model).  x_kv supplies the key/value source for
    cross-attention (defaults to x).
    """
    x = np.asarray(x, dtype=np.float64)
    src = x if x_kv is None else np.asarray(x_kv, dtype=np.float64)
    heads = []
    for h in range(len(wq)):
        q = x @ np.asarray(wq[h], dtype=np.float64)
        k = src @ np.asarray(wk[h], dtype=np.float64)
        v = src @ np.asarray(wv[h], dtype=np.float64)
        heads.append(attention_head(q, k, v, causal=causal))
    concat = np.hstack(heads)
    return concat @ np.asarray(wo, dtype=np.float64)


def encoder_decoder_attention(x, wq, wk, wv, wo):
    """Float reference for the two-layer encoder-decoder flow: a non-causal
    encoder pass and a causal decoder self-attention pass over the same
    input, then cross-attention of the decoder hidden state against the
    encoder output."""
    enc = multi_head_attention(x, wq, wk, wv, wo, causal=False)
    hidden = multi_head_attention(x, wq, wk, wv, wo, causal=True)
    return multi_head_attention(hidden, wq, wk, wv, wo, causal=False,
                                x_kv=enc)
