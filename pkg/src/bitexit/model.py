"""Decoder-only transformer assembled from the variant recipes.

Variants (weight mode, activation bits, Hadamard):
    v1 = (ternary, 8, off), v2 = (ternary, 4, on), v3 = (ternary, 8, on),
    baseline = (full precision, none, off).
All variants share the architecture — embedding, L pre-norm blocks, final
RMSNorm, untied LM head — and differ only in how their linear layers
represent weights and activations. The LM head is shared by every exit
layer: exiting at layer k applies the final norm and head to h_k.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .layers import (AttentionParams, BlockParams, DropoutSchedule, FFNParams,
                     LinearLayerSpec, layer_skip_apply, schedule_p,
                     transformer_block)
from .tensor import Tensor

ROPE_THETA = 10000.0
INIT_STD = 0.02


@dataclass(frozen=True)
class VariantConfig:
    name: str
    weight_mode: str
    activation_bits: int | None
    hadamard: bool


VARIANTS = {
    "v1": VariantConfig("v1", "ternary", 8, False),
    "v2": VariantConfig("v2", "ternary", 4, True),
    "v3": VariantConfig("v3", "ternary", 8, True),
    "baseline": VariantConfig("baseline", "full_precision", None, False),
}


class UnknownVariantError(ValueError):
    pass


def variant_from_name(name: str) -> VariantConfig:
    key = name.strip().lower()
    if key not in VARIANTS:
        raise UnknownVariantError(
            f"unknown variant {name!r}; valid options: {', '.join(sorted(VARIANTS))}")
    return VARIANTS[key]


@dataclass
class ModelConfig:
    layers: int = 8
    hidden: int = 256
    heads: int = 8
    kv_heads: int = 2
    ffn_dim: int = 512
    vocab_size: int = 259
    max_seq_len: int = 256
    schedule: DropoutSchedule = field(
        default_factory=lambda: DropoutSchedule(p_max=0.5, mode="raw", layer_count=8))
    variant: VariantConfig = field(default_factory=lambda: VARIANTS["baseline"])
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.heads % self.kv_heads:
            raise ValueError(
                f"heads {self.heads} not divisible by kv_heads {self.kv_heads}")
        if (self.hidden // self.heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if self.variant.hadamard:
            for n, label in ((self.hidden, "hidden"), (self.ffn_dim, "ffn_dim")):
                if n & (n - 1):
                    raise ValueError(
                        f"{label}={n} must be a power of two for Hadamard variants")
        if self.schedule.layer_count != self.layers:
            raise ValueError("schedule.layer_count must equal layers")

    def linear_spec(self, in_features: int, out_features: int) -> LinearLayerSpec:
        v = self.variant
        return LinearLayerSpec(in_features, out_features, v.weight_mode,
                               v.activation_bits, v.hadamard)


@dataclass
class ForwardTrace:
    logits: Tensor                    # [batch*seq, vocab]
    hidden: list                      # L tensors of [batch, seq, hidden]
    skip_mask: list | None            # per-layer skip booleans (train phase)
    batch: int
    seq: int


class Model:
    """Parameter store plus the per-layer structure views."""

    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        self.params = params  # name -> Tensor, insertion order is canonical
        self.blocks = []
        for l in range(cfg.layers):
            attn = AttentionParams(
                norm_gain=params[f"layers.{l}.attn.norm.gain"],
                wq=params[f"layers.{l}.attn.q.weight"],
                wk=params[f"layers.{l}.attn.k.weight"],
                wv=params[f"layers.{l}.attn.v.weight"],
                wo=params[f"layers.{l}.attn.o.weight"])
            ffn = FFNParams(
                norm_gain=params[f"layers.{l}.ffn.norm.gain"],
                w_gate=params[f"layers.{l}.ffn.gate.weight"],
                w_up=params[f"layers.{l}.ffn.up.weight"],
                w_down=params[f"layers.{l}.ffn.down.weight"])
            self.blocks.append(BlockParams(attn=attn, ffn=ffn))
        self.embed = params["embed.weight"]
        self.final_gain = params["final_norm.gain"]
        self.head = params["head.weight"]
        self.rope_cos, self.rope_sin = _rope_tables(
            cfg.max_seq_len, cfg.hidden // cfg.heads)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None


def _rope_tables(max_len: int, head_dim: int):
    half = head_dim // 2
    inv_freq = ROPE_THETA ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.arange(max_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return (np.cos(angles).astype(np.float32),
            np.sin(angles).astype(np.float32))


def build_model(config: ModelConfig) -> Model:
    """Seeded init: normal(0, 0.02) weights, unit norm gains, untied head."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, kv_dim = config.hidden, config.kv_heads * (config.hidden // config.heads)

    def w(*shape):
        return Tensor(rng.normal(0.0, INIT_STD, size=shape).astype(np.float32),
                      requires_grad=True)

    def gain(n):
        return Tensor(np.ones(n, dtype=np.float32), requires_grad=True)

    params: dict[str, Tensor] = {}
    params["embed.weight"] = w(config.vocab_size, d)
    for l in range(config.layers):
        params[f"layers.{l}.attn.norm.gain"] = gain(d)
        params[f"layers.{l}.attn.q.weight"] = w(d, d)
        params[f"layers.{l}.attn.k.weight"] = w(kv_dim, d)
        params[f"layers.{l}.attn.v.weight"] = w(kv_dim, d)
        params[f"layers.{l}.attn.o.weight"] = w(d, d)
        params[f"layers.{l}.ffn.norm.gain"] = gain(d)
        params[f"layers.{l}.ffn.gate.weight"] = w(config.ffn_dim, d)
        params[f"layers.{l}.ffn.up.weight"] = w(config.ffn_dim, d)
        params[f"layers.{l}.ffn.down.weight"] = w(d, config.ffn_dim)
    params["final_norm.gain"] = gain(d)
    params["head.weight"] = w(config.vocab_size, d)
    return Model(config, params)


def _check_tokens(model: Model, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [batch, seq], got shape {tokens.shape}")
    if tokens.shape[1] > model.cfg.max_seq_len:
        raise ValueError(
            f"sequence length {tokens.shape[1]} exceeds max {model.cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.cfg.vocab_size):
        raise ValueError("token id outside the vocabulary")
    return tokens


def head_logits(model: Model, h: Tensor) -> Tensor:
    """Shared exit head: final RMSNorm then LM projection, -> [tokens, vocab]."""
    b, t, d = h.shape
    hn = tensor.rmsnorm(h, model.final_gain, 1e-5)
    return tensor.matmul(tensor.reshape(hn, (b * t, d)),
                         tensor.transpose2d(model.head))


def forward_full(model: Model, tokens, phase: str = "infer",
                 rng=None, skip_mask=None) -> ForwardTrace:
    """Run all L blocks, recording each post-block hidden state.

    In the train phase each layer is skipped with its schedule probability
    (one Bernoulli draw per layer), unless an explicit skip_mask is given.
    """
    tokens = _check_tokens(model, tokens)
    b, t = tokens.shape
    cfg = model.cfg
    cos, sin = model.rope_cos, model.rope_sin

    h = tensor.embedding(model.embed, tokens)
    hidden, mask = [], []
    for l, block in enumerate(model.blocks, start=1):
        run = lambda x, blk=block: transformer_block(x, blk, cfg, cos, sin)
        if skip_mask is not None:
            skipped = bool(skip_mask[l - 1]) and phase == "train"
            h = h if skipped else run(h)
        elif phase == "train":
            p = schedule_p(l, cfg.schedule)
            h, skipped = layer_skip_apply(h, run, p, phase, rng)
        else:
            h, skipped = run(h), False
        hidden.append(h)
        mask.append(skipped)
    logits = head_logits(model, h)
    return ForwardTrace(logits=logits, hidden=hidden,
                        skip_mask=mask if phase == "train" else None,
                        batch=b, seq=t)


def forward_exit_at(model: Model, tokens, k: int) -> Tensor:
    """Execute blocks 1..k only and project h_k through the shared head."""
    if not 1 <= k <= model.cfg.layers:
        raise ValueError(f"exit layer {k} outside 1..{model.cfg.layers}")
    tokens = _check_tokens(model, tokens)
    cfg = model.cfg
    h = tensor.embedding(model.embed, tokens)
    for block in model.blocks[:k]:
        h = transformer_block(h, block, cfg, model.rope_cos, model.rope_sin)
    return head_logits(model, h)


@dataclass
class GenerationResult:
    tokens: list
    elapsed_s: float
    truncated: bool = False   # context window overflowed during decoding


def generate(model: Model, prompt, n_tokens: int,
             exit_layer: int | None = None) -> GenerationResult:
    """Greedy decoding, one token per full re-encode of the active window.

    Ties in the argmax resolve to the lowest token id. The elapsed time
    covers the generation loop only; prompt ingestion is excluded. When the
    context exceeds max_seq_len the window keeps the most recent tokens.
    """
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    window = list(int(t) for t in prompt)
    if not window:
        raise ValueError("prompt must contain at least one token")
    out: list[int] = []
    truncated = False
    max_len = model.cfg.max_seq_len

    t0 = time.perf_counter()
    for _ in range(n_tokens):
        if len(window) > max_len:
            window = window[-max_len:]
            truncated = True
        ids = np.asarray([window], dtype=np.int64)
        if exit_layer is None:
            logits = forward_full(model, ids, phase="infer").logits
        else:
            logits = forward_exit_at(model, ids, exit_layer)
        nxt = int(np.argmax(logits.data[-1]))
        out.append(nxt)
        window.append(nxt)
    elapsed = time.perf_counter() - t0
    return GenerationResult(tokens=out, elapsed_s=elapsed, truncated=truncated)
