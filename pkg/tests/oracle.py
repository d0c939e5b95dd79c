"""Independent plain top-K MoE transformer forward in straight numpy.

Written per token with explicit loops over selected experts; it shares no code
with the package beyond reading the parameter dict.
"""

import math

import numpy as np


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def _softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def plain_moe_logits(P, tokens, num_layers, heads, top_k):
    """Logits [B, T, V] of a standard top-K MoE decoder."""
    P = {k: v.data for k, v in P.items()}
    B, T = tokens.shape
    x = P["tok_emb"][tokens] + P["pos_emb"][:T]
    d = x.shape[-1]
    dh = d // heads
    causal = np.tril(np.ones((T, T), dtype=bool))
    for l in range(num_layers):
        p = f"layers.{l}."
        h = _ln(x, P[p + "ln1.gain"], P[p + "ln1.bias"])
        att_out = np.zeros_like(x)
        q, k, v = (h @ P[p + "attn." + m] for m in ("wq", "wk", "wv"))
        heads_out = []
        for hd in range(heads):
            s = slice(hd * dh, (hd + 1) * dh)
            sc = q[..., s] @ np.swapaxes(k[..., s], -1, -2) / math.sqrt(dh)
            sc = np.where(causal, sc, -np.inf)
            heads_out.append(_softmax(sc) @ v[..., s])
        att_out = np.concatenate(heads_out, axis=-1) @ P[p + "attn.wo"]
        x = x + att_out
        h = _ln(x, P[p + "ln2.gain"], P[p + "ln2.bias"])
        W, bias = P[p + "router.weight"], P.get(p + "router.bias")
        w1, w2 = P[p + "experts.w1"], P[p + "experts.w2"]
        moe = np.zeros_like(x)
        for b in range(B):
            for t in range(T):
                logits = W @ h[b, t] + (0.0 if bias is None else bias)
                order = sorted(range(len(logits)), key=lambda i: (-logits[i], i))[:top_k]
                g = _softmax(logits[order])
                for gi, e in zip(g, order):
                    moe[b, t] += gi * (_gelu(h[b, t] @ w1[e]) @ w2[e])
        x = x + moe
    return _ln(x, P["ln_f.gain"], P["ln_f.bias"]) @ P["lm_head"]
