"""Transformer building blocks: quantized linears, GQA attention, gated FFN,
the quadratic layer-dropout schedule and the stochastic skip operator.

A linear layer's forward pipeline is, in order:
  1. optional Hadamard rotation of the input rows (activation preconditioning)
  2. optional per-token activation quantization (8 or 4 bit)
  3. weight ternarization of the full-precision shadow matrix
  4. y = x @ W^T
Gradients flow through both quantizers by straight-through estimation; the
Hadamard rotation backpropagates exactly (self-adjoint).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quant, tensor
from .hadamard import fht_rows
from .tensor import Tensor

RMS_EPS = 1e-5

WEIGHT_MODES = ("full_precision", "ternary")


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class LinearLayerSpec:
    """One linear layer's quantization recipe (Standard / BitLinear / H-BitLinear)."""

    in_features: int
    out_features: int
    weight_mode: str = "full_precision"
    activation_bits: int | None = None
    hadamard: bool = False

    def __post_init__(self):
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")
        if self.activation_bits not in (None, 4, 8):
            raise ValueError(f"activation bits must be 4, 8 or None")
        if self.hadamard and not _is_pow2(self.in_features):
            raise ValueError(
                f"Hadamard preconditioning needs power-of-two in_features, "
                f"got {self.in_features}")


def bitlinear_forward(x: Tensor, spec: LinearLayerSpec, shadow_w: Tensor) -> Tensor:
    """Quantized linear transform of token rows: [tokens, in] -> [tokens, out]."""
    if x.shape[-1] != spec.in_features:
        raise tensor.DimensionError(
            f"input features {x.shape[-1]} != spec.in_features {spec.in_features}")
    if shadow_w.shape != (spec.out_features, spec.in_features):
        raise tensor.DimensionError(
            f"weight shape {shadow_w.shape} != "
            f"({spec.out_features}, {spec.in_features})")
    h = fht_rows(x) if spec.hadamard else x
    if spec.activation_bits is not None:
        h = quant.activation_forward(h, spec.activation_bits)
    if spec.weight_mode == "ternary":
        w = quant.ternary_forward(shadow_w)
    else:
        w = shadow_w
    return tensor.matmul(h, tensor.transpose2d(w))


# ---------------------------------------------------------------------------
# layer dropout


@dataclass(frozen=True)
class DropoutSchedule:
    """Quadratic-in-depth skip probabilities p(l) for layers l = 1..L."""

    p_max: float
    mode: str = "raw"          # "raw" or "sum_normalized"
    layer_count: int = 1

    def __post_init__(self):
        if not 0.0 <= self.p_max <= 1.0:
            raise ValueError(f"p_max must be in [0, 1], got {self.p_max}")
        if self.mode not in ("raw", "sum_normalized"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.layer_count < 1:
            raise ValueError("layer_count must be >= 1")


def schedule_p(l: int, sched: DropoutSchedule) -> float:
    """Skip probability for layer l (1-based).

    raw mode: p_max * (l/L)^2. sum_normalized mode divides the raw value by
    the sum over all layers, so the probabilities sum to one (p_max cancels).
    """
    L = sched.layer_count
    if not 1 <= l <= L:
        raise ValueError(f"layer index {l} outside 1..{L}")
    raw = sched.p_max * (l / L) ** 2
    if sched.mode == "raw":
        return raw
    total = sum(k * k for k in range(1, L + 1))
    return (l * l) / total


def layer_skip_apply(h: Tensor, block, p: float, phase: str, rng) -> tuple[Tensor, bool]:
    """Stochastic depth: with probability p (train phase) pass h through untouched.

    Returns (output, skipped). Inference always executes the block; early
    exit is a model-level decision, not a random one.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"skip probability {p} outside [0, 1]")
    if phase == "train" and p > 0.0 and rng.random() < p:
        return h, True
    return block(h), False


# ---------------------------------------------------------------------------
# attention / FFN blocks


@dataclass
class AttentionParams:
    norm_gain: Tensor
    wq: Tensor   # [d, d]
    wk: Tensor   # [kv_heads*head_dim, d]
    wv: Tensor   # [kv_heads*head_dim, d]
    wo: Tensor   # [d, d]


@dataclass
class FFNParams:
    norm_gain: Tensor
    w_gate: Tensor  # [ffn_dim, d]
    w_up: Tensor    # [ffn_dim, d]
    w_down: Tensor  # [d, ffn_dim]


@dataclass
class BlockParams:
    attn: AttentionParams
    ffn: FFNParams


def attention_block(x: Tensor, params: AttentionParams, cfg, rope_cos, rope_sin) -> Tensor:
    """Pre-norm causal attention with grouped KV heads and rotary embeddings.

    cfg provides hidden/heads/kv_heads and the variant's linear specs.
    x is [batch, seq, hidden]; the residual add is included.
    """
    b, t, d = x.shape
    heads, kv_heads = cfg.heads, cfg.kv_heads
    hd = d // heads
    group = heads // kv_heads

    xn = tensor.rmsnorm(x, params.norm_gain, RMS_EPS)
    x2 = tensor.reshape(xn, (b * t, d))
    q = bitlinear_forward(x2, cfg.linear_spec(d, d), params.wq)
    k = bitlinear_forward(x2, cfg.linear_spec(d, kv_heads * hd), params.wk)
    v = bitlinear_forward(x2, cfg.linear_spec(d, kv_heads * hd), params.wv)

    q = tensor.permute(tensor.reshape(q, (b, t, heads, hd)), (0, 2, 1, 3))
    k = tensor.permute(tensor.reshape(k, (b, t, kv_heads, hd)), (0, 2, 1, 3))
    v = tensor.permute(tensor.reshape(v, (b, t, kv_heads, hd)), (0, 2, 1, 3))

    q = tensor.rope(q, rope_cos, rope_sin)
    k = tensor.rope(k, rope_cos, rope_sin)
    if group > 1:
        k = tensor.repeat_heads(k, group)
        v = tensor.repeat_heads(v, group)

    scores = tensor.scale(tensor.bmm(q, tensor.permute(k, (0, 1, 3, 2))),
                          1.0 / np.sqrt(hd))
    probs = tensor.causal_softmax(scores)
    ctx = tensor.bmm(probs, v)                                   # [b, heads, t, hd]
    ctx = tensor.reshape(tensor.permute(ctx, (0, 2, 1, 3)), (b * t, d))
    out = bitlinear_forward(ctx, cfg.linear_spec(d, d), params.wo)
    return tensor.add(x, tensor.reshape(out, (b, t, d)))


def ffn_block(x: Tensor, params: FFNParams, cfg) -> Tensor:
    """Pre-norm gated FFN: silu(x W_g^T) * (x W_u^T) W_d^T, residual included."""
    b, t, d = x.shape
    ffn_dim = params.w_gate.shape[0]
    xn = tensor.rmsnorm(x, params.norm_gain, RMS_EPS)
    x2 = tensor.reshape(xn, (b * t, d))
    gate = tensor.silu(bitlinear_forward(x2, cfg.linear_spec(d, ffn_dim), params.w_gate))
    up = bitlinear_forward(x2, cfg.linear_spec(d, ffn_dim), params.w_up)
    y = bitlinear_forward(tensor.mul(gate, up),
                          cfg.linear_spec(ffn_dim, d), params.w_down)
    return tensor.add(x, tensor.reshape(y, (b, t, d)))


def transformer_block(x: Tensor, params: BlockParams, cfg, rope_cos, rope_sin) -> Tensor:
    """One full layer: attention sublayer then FFN sublayer."""
    h = attention_block(x, params.attn, cfg, rope_cos, rope_sin)
    return ffn_block(h, params.ffn, cfg)
