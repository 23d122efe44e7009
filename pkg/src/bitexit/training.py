"""Training: the early-exit objective, AdamW, LR schedule, and the QAT loop.

The total objective is
    total = main + lambda * sum_i w_i * exit_i,   i = 1..L-1,
where main is the next-token cross-entropy of the final layer, exit_i the
cross-entropy of the shared head applied to hidden state h_i, and the raw
layer-proportional weights (i+1)/L are normalized to sum to one. The final
layer is supervised through the main term only.

Phase 1 (early_exit=False) trains with layer dropout off and lambda=0;
exit losses are still evaluated for logging but contribute nothing.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor
from .layers import DropoutSchedule, schedule_p
from .model import Model, forward_full, head_logits
from .tensor import ComputeGraph, Tensor
from .tokenizer import PAD, Corpus, windows_for_step

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lr_peak: float = 6e-4
    warmup_steps: int = 1000
    max_steps: int = 50_000
    batch_size: int = 16
    grad_accum_steps: int = 4
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    lam: float = 0.3
    p_max: float = 0.5
    seed: int = 0

    @classmethod
    def for_variant(cls, variant_name: str, **overrides) -> "TrainConfig":
        """Hyperparameter defaults: 4-bit variants train slower and clip harder."""
        base = dict(lr_peak=6e-4, warmup_steps=1000, clip_norm=1.0)
        if variant_name.lower() == "v2":
            base = dict(lr_peak=3e-4, warmup_steps=4000, clip_norm=0.5)
        base.update(overrides)
        return cls(**base)


@dataclass
class LossBreakdown:
    main_loss: float
    exit_losses: list
    weights: list
    lam: float
    total: float


@dataclass
class StepRecord:
    step: int
    lr: float
    grad_norm: float
    breakdown: LossBreakdown


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    csv_path: Path | None = None
    final_checkpoint: Path | None = None


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean -log softmax(logits)[target] in nats over unmasked positions.

    Returns a scalar tensor so the loss can sit in a compute graph; the
    reduction runs in float64. Padding positions (mask False) are excluded.
    """
    targets = np.asarray(targets).reshape(-1)
    n, v = logits.shape
    if targets.size != n:
        raise ValueError(f"{targets.size} targets for {n} logit rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError("target id outside vocabulary")
    if mask is None:
        mask = np.ones(n, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
    n_eff = int(mask.sum())
    if n_eff == 0:
        raise ValueError("no unmasked positions to average over")

    z = logits.data.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), targets]
    value = np.float32(nll[mask].mean())

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        p[~mask] = 0.0
        return ((p * (float(g) / n_eff)).astype(np.float32),)

    return tensor._finish(np.asarray(value).reshape(()), (logits,), bwd)


def exit_weights(layer_count: int) -> np.ndarray:
    """Normalized layer-proportional weights (i+1)/L for exits 1..L-1."""
    if layer_count < 2:
        return np.zeros(0)
    raw = np.array([(i + 1) / layer_count for i in range(1, layer_count)])
    return raw / raw.sum()


def early_exit_loss(trace, targets, model: Model, lam: float = 0.3,
                    mask=None) -> tuple[Tensor, LossBreakdown]:
    """Combined objective and its per-term breakdown for one forward trace.

    With lam == 0 the exit terms are evaluated outside the graph (reported
    but contributing neither loss nor gradient).
    """
    L = model.cfg.layers
    if len(trace.hidden) != L:
        raise ValueError(f"trace has {len(trace.hidden)} hidden states, want {L}")
    flat_targets = np.asarray(targets).reshape(-1)
    if flat_targets.size != trace.logits.shape[0]:
        raise ValueError("targets do not match trace length")
    if mask is None:
        mask = flat_targets != PAD

    main = cross_entropy(trace.logits, flat_targets, mask)
    weights = exit_weights(L)

    exit_vals: list[float] = []
    if lam != 0.0 and L >= 2:
        weighted = None
        for i in range(1, L):
            logits_i = head_logits(model, trace.hidden[i - 1])
            e_i = cross_entropy(logits_i, flat_targets, mask)
            exit_vals.append(e_i.item())
            term = tensor.scale(e_i, float(weights[i - 1]))
            weighted = term if weighted is None else tensor.add(weighted, term)
        total = tensor.add(main, tensor.scale(weighted, lam))
    else:
        with tensor.no_grad():
            for i in range(1, L):
                logits_i = head_logits(model, trace.hidden[i - 1].detach())
                exit_vals.append(cross_entropy(logits_i, flat_targets, mask).item())
        total = main

    breakdown = LossBreakdown(main_loss=main.item(), exit_losses=exit_vals,
                              weights=list(map(float, weights)), lam=lam,
                              total=total.item())
    return total, breakdown


# ---------------------------------------------------------------------------
# optimizer and schedule


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr_peak over warmup, then linear decay to 0 at max."""
    if not 0 <= step <= cfg.max_steps:
        raise ValueError(f"step {step} outside 0..{cfg.max_steps}")
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    span = cfg.max_steps - cfg.warmup_steps
    if span <= 0:
        return cfg.lr_peak
    return cfg.lr_peak * (cfg.max_steps - step) / span


def clip_gradients(params, clip_norm: float) -> float:
    """Global-norm clip over all gradients; returns the pre-clip norm."""
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    sq = 0.0
    for t in tensors:
        if t.grad is not None:
            sq += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(sq))
    if clip_norm and norm > clip_norm:
        factor = np.float32(clip_norm / norm)
        for t in tensors:
            if t.grad is not None:
                t.grad *= factor
    return norm


def adamw_state(params: dict) -> dict:
    return {"t": 0,
            "m": {k: np.zeros_like(p.data) for k, p in params.items()},
            "v": {k: np.zeros_like(p.data) for k, p in params.items()}}


def adamw_step(params: dict, state: dict, lr: float, weight_decay: float,
               betas=ADAM_BETAS, eps=ADAM_EPS) -> None:
    """Decoupled-weight-decay Adam with bias correction.

    Decay applies to weight matrices only; rank-1 parameters (norm gains)
    are exempt. Parameters with no gradient are still decayed and their
    moments updated with g = 0.
    """
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        m, v = state["m"][name], state["v"][name]
        if m.shape != p.data.shape:
            raise ValueError(f"optimizer state shape mismatch for {name}")
        if p.grad is not None:
            g = p.grad
            m *= np.float32(b1)
            m += np.float32(1.0 - b1) * g
            v *= np.float32(b2)
            v += np.float32(1.0 - b2) * np.square(g)
        else:
            m *= np.float32(b1)
            v *= np.float32(b2)
        # update = lr * (m/bc1) / (sqrt(v/bc2) + eps), built in-place
        denom = np.sqrt(v)
        denom *= np.float32(1.0 / np.sqrt(bc2))
        denom += np.float32(eps)
        np.divide(m, denom, out=denom)
        denom *= np.float32(lr / bc1)
        if weight_decay and p.data.ndim >= 2:
            p.data *= np.float32(1.0 - lr * weight_decay)
        p.data -= denom


class AdamW:
    def __init__(self, params: dict, weight_decay: float = 0.1,
                 betas=ADAM_BETAS, eps=ADAM_EPS, state: dict | None = None):
        self.params = params
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = state if state is not None else adamw_state(params)

    def step(self, lr: float) -> None:
        adamw_step(self.params, self.state, lr, self.weight_decay,
                   self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# the loop


def _draw_skip_mask(cfg: TrainConfig, model: Model, step: int) -> list[bool]:
    sched = DropoutSchedule(cfg.p_max, model.cfg.schedule.mode, model.cfg.layers)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, step)))
    return [rng.random() < schedule_p(l, sched) for l in range(1, model.cfg.layers + 1)]


def _mean_breakdown(parts: list[LossBreakdown]) -> LossBreakdown:
    k = len(parts)
    exits = [float(np.mean([b.exit_losses[i] for b in parts]))
             for i in range(len(parts[0].exit_losses))]
    return LossBreakdown(
        main_loss=float(np.mean([b.main_loss for b in parts])),
        exit_losses=exits, weights=parts[0].weights, lam=parts[0].lam,
        total=float(np.mean([b.total for b in parts])))


def _log_rows_to_csv(records, layer_count: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "lr", "grad_norm", "main", "total"]
               + [f"exit_{i}" for i in range(1, layer_count)])
    for r in records:
        w.writerow([r.step, repr(r.lr), repr(r.grad_norm),
                    repr(r.breakdown.main_loss), repr(r.breakdown.total)]
                   + [repr(e) for e in r.breakdown.exit_losses])
    return buf.getvalue()


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def train(model: Model, corpus: Corpus, cfg: TrainConfig, early_exit: bool = True,
          out_dir=None, log_every: int = 10, checkpoint_every: int = 0,
          start_step: int = 0, optimizer: AdamW | None = None,
          on_step=None) -> TrainingLog:
    """Run (max_steps - start_step) optimizer steps of QAT.

    Each optimizer step draws batch_size * grad_accum_steps random windows
    (one draw per step so accumulation is equivalent to a bigger batch),
    one skip mask shared across the micro-batches, and averages the loss.
    Data and skip randomness are keyed by (seed, step), so resuming from a
    checkpoint at step k continues the exact uninterrupted sequence.
    """
    seq = model.cfg.max_seq_len
    opt = optimizer or AdamW(model.params, weight_decay=cfg.weight_decay)
    log = TrainingLog()
    lam_eff = cfg.lam if early_exit else 0.0
    accum = max(1, cfg.grad_accum_steps)

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = logs_dir = None
    if out_dir is not None:
        ckpt_dir = out_dir / "checkpoints"
        logs_dir = out_dir / "logs"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        logs_dir.mkdir(parents=True, exist_ok=True)
        log.csv_path = logs_dir / "train_log.csv"

    # probes the corpus size before the first step
    windows_for_step(corpus, cfg.batch_size * accum, seq, cfg.seed, 0)

    for step in range(start_step + 1, cfg.max_steps + 1):
        lr = lr_at(step, cfg)
        inputs, targets = windows_for_step(
            corpus, cfg.batch_size * accum, seq, cfg.seed, step - 1)
        skip_mask = (_draw_skip_mask(cfg, model, step)
                     if early_exit and cfg.p_max > 0
                     else [False] * model.cfg.layers)

        opt.zero_grad()
        parts = []
        for i in range(accum):
            lo, hi = i * cfg.batch_size, (i + 1) * cfg.batch_size
            with ComputeGraph() as g:
                trace = forward_full(model, inputs[lo:hi], phase="train",
                                     skip_mask=skip_mask)
                total, bd = early_exit_loss(trace, targets[lo:hi], model, lam_eff)
                loss = tensor.scale(total, 1.0 / accum)
            g.backward(loss)
            parts.append(bd)

        grad_norm = clip_gradients(model.params, cfg.clip_norm)
        opt.step(lr)
        rec = StepRecord(step=step, lr=lr, grad_norm=grad_norm,
                         breakdown=_mean_breakdown(parts))
        log.records.append(rec)
        if on_step is not None:
            on_step(rec)

        if out_dir is not None:
            if step % log_every == 0 or step == cfg.max_steps:
                _atomic_write_text(
                    log.csv_path, _log_rows_to_csv(log.records, model.cfg.layers))
            if checkpoint_every and step % checkpoint_every == 0:
                ckpt.save_checkpoint(model, opt.state, step,
                                     ckpt_dir / f"step_{step:06d}.ckpt")

    if out_dir is not None:
        _atomic_write_text(log.csv_path,
                           _log_rows_to_csv(log.records, model.cfg.layers))
        log.final_checkpoint = ckpt_dir / "final.ckpt"
        ckpt.save_checkpoint(model, opt.state, cfg.max_steps, log.final_checkpoint)
    return log
