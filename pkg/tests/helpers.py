"""Independent oracles used across the test suite.

Everything here is deliberately written without touching the library's
forward/backward code paths: float64 numpy, explicit loops where that is
the honest brute-force formulation. Tests freeze expected values computed
by these references.
"""

import numpy as np


def naive_matmul(a, b):
    """Triple-loop matrix product in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def brute_ternary(w):
    """Per-element reimplementation of the ternary rule."""
    w = np.asarray(w, dtype=np.float32)
    flat = w.reshape(-1)
    acc = 0.0
    for v in flat:
        acc += abs(float(v))
    alpha = np.float32(acc / flat.size)
    thr = 0.5 * float(alpha)
    codes = np.zeros(w.shape, dtype=np.int8)
    for idx in np.ndindex(w.shape):
        v = float(w[idx])
        if v > thr:
            codes[idx] = 1
        elif v < -thr:
            codes[idx] = -1
    return codes, alpha


def brute_activation_quant(x, bits):
    """Row-by-row reimplementation of the activation quantizer."""
    x = np.asarray(x, dtype=np.float64)
    q, lo, hi = {8: (127.0, -128.0, 127.0), 4: (7.0, -8.0, 7.0)}[bits]
    out = np.zeros_like(x)
    scales = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        s = max(abs(float(v)) for v in x[i])
        scales[i] = s if s >= 1e-8 else 0.0
        if s < 1e-8:
            continue
        for j in range(x.shape[1]):
            scaled = min(max(x[i, j] / s * q, lo), hi)
            k = np.sign(scaled) * np.floor(abs(scaled) + 0.5)
            out[i, j] = k * s / q
    return out, scales


def finite_difference(f, x, h=1e-3):
    """Central differences of scalar f at float64 point x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# ---------------------------------------------------------------------------
# float64 reference transformer (full precision, no dropout)
#
# Mirrors the architecture contract: pre-norm RMSNorm blocks, rotary
# embeddings, grouped KV heads, gated-silu FFN, final norm, untied head.


def ref_rmsnorm(x, gain, eps=1e-5):
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x / np.sqrt(ms + eps) * gain


def ref_silu(x):
    return x / (1.0 + np.exp(-x))


def ref_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ref_rope_tables(max_len, head_dim, theta=10000.0):
    half = head_dim // 2
    inv_freq = theta ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.arange(max_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def ref_apply_rope(x, cos, sin):
    # x: [b, h, t, hd]
    b, h, t, hd = x.shape
    xp = x.reshape(b, h, t, hd // 2, 2)
    x1, x2 = xp[..., 0], xp[..., 1]
    c, s = cos[:t], sin[:t]
    out = np.empty_like(xp)
    out[..., 0] = x1 * c - x2 * s
    out[..., 1] = x1 * s + x2 * c
    return out.reshape(b, h, t, hd)


def ref_attention(x, gain, wq, wk, wv, wo, heads, kv_heads):
    b, t, d = x.shape
    hd = d // heads
    group = heads // kv_heads
    xn = ref_rmsnorm(x, gain)
    x2 = xn.reshape(b * t, d)
    q = (x2 @ wq.T).reshape(b, t, heads, hd).transpose(0, 2, 1, 3)
    k = (x2 @ wk.T).reshape(b, t, kv_heads, hd).transpose(0, 2, 1, 3)
    v = (x2 @ wv.T).reshape(b, t, kv_heads, hd).transpose(0, 2, 1, 3)
    cos, sin = ref_rope_tables(t, hd)
    q = ref_apply_rope(q, cos, sin)
    k = ref_apply_rope(k, cos, sin)
    k = np.repeat(k, group, axis=1)
    v = np.repeat(v, group, axis=1)
    scores = np.matmul(q, k.transpose(0, 1, 3, 2)) / np.sqrt(hd)
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    probs = ref_softmax(scores)
    ctx = np.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b * t, d)
    return x + (ctx @ wo.T).reshape(b, t, d)


def ref_ffn(x, gain, w_gate, w_up, w_down):
    b, t, d = x.shape
    xn = ref_rmsnorm(x, gain).reshape(b * t, d)
    y = (ref_silu(xn @ w_gate.T) * (xn @ w_up.T)) @ w_down.T
    return x + y.reshape(b, t, d)


def ref_forward_logits(params64, cfg, tokens):
    """Full-precision forward pass in float64 from a name->array dict."""
    tokens = np.asarray(tokens)
    b, t = tokens.shape
    h = params64["embed.weight"][tokens]
    for l in range(cfg.layers):
        p = lambda s: params64[f"layers.{l}.{s}"]
        h = ref_attention(h, p("attn.norm.gain"), p("attn.q.weight"),
                          p("attn.k.weight"), p("attn.v.weight"),
                          p("attn.o.weight"), cfg.heads, cfg.kv_heads)
        h = ref_ffn(h, p("ffn.norm.gain"), p("ffn.gate.weight"),
                    p("ffn.up.weight"), p("ffn.down.weight"))
    hn = ref_rmsnorm(h, params64["final_norm.gain"])
    return (hn.reshape(b * t, -1) @ params64["head.weight"].T)


def ref_cross_entropy(logits, targets, mask=None):
    """Mean NLL in nats over unmasked positions, float64 throughout."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets).reshape(-1)
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(targets.size), targets]
    if mask is not None:
        mask = np.asarray(mask).reshape(-1)
        nll = nll[mask]
    return float(nll.mean())
