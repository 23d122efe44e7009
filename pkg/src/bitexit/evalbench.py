"""Evaluation harness: perplexity, throughput, exit sweeps, variance profiles.

Conventions, fixed so numbers are comparable within this harness:
  - perplexity = exp(mean next-token cross-entropy in nats) over
    non-overlapping windows of the model's max sequence length;
  - ppl_delta_pct = (ppl_k / ppl_full - 1) * 100, positive means worse
    (published tables sometimes list the same quantity with a negative
    "decrease" sign — this harness always reports the signed increase);
  - speed_gain_pct = (tok_k / tok_full - 1) * 100;
  - quality_speed_ratio = ppl_delta_pct / speed_gain_pct, lower is better,
    undefined (NaN, "NA" in CSV) when the speed gain is not positive;
  - throughput = median over repeated greedy-generation runs after one
    warm-up, wall clock around the generation loop only.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Model, forward_exit_at, forward_full, generate
from .tokenizer import Corpus
from .training import cross_entropy

VIABILITY_DELTA_PCT = 10.0

SWEEP_COLUMNS = ["variant", "exit_layer", "ppl", "tok_per_s",
                 "ppl_delta_pct", "speed_gain_pct", "ratio"]
VARIANCE_COLUMNS = ["variant", "layer", "std"]
COMPARE_COLUMNS = ["variant", "full_ppl", "full_tok_per_s", "quality_rank",
                   "speed_rank", "ppl_delta_pct_3l4", "exit_viability",
                   "quality_speed_ratio_3l4"]


class ReportError(ValueError):
    pass


def _corpus_ids(corpus) -> np.ndarray:
    ids = corpus.ids if isinstance(corpus, Corpus) else np.asarray(corpus)
    if ids.size == 0:
        raise ReportError("empty evaluation corpus")
    return ids.astype(np.int64)


def quality_speed_ratio(ppl_delta_pct: float, speed_gain_pct: float) -> float:
    """Percent quality loss per percent speed gained; NaN when gain <= 0."""
    if speed_gain_pct > 0:
        return ppl_delta_pct / speed_gain_pct
    return math.nan


def perplexity(model: Model, corpus, exit_layer: int | None = None,
               eval_batch: int = 16) -> float:
    """exp(mean CE) over non-overlapping max_seq_len windows, dropout off."""
    ids = _corpus_ids(corpus)
    window = model.cfg.max_seq_len
    chunks = [ids[i:i + window] for i in range(0, len(ids), window)]
    chunks = [c for c in chunks if len(c) >= 2]
    if not chunks:
        raise ReportError("corpus shorter than one evaluation window")

    def logits_for(batch):
        if exit_layer is None:
            return forward_full(model, batch, phase="infer").logits
        return forward_exit_at(model, batch, exit_layer)

    total_nll = 0.0
    total_count = 0
    full = [c for c in chunks if len(c) == window]
    tail = [c for c in chunks if len(c) < window]
    for i in range(0, len(full), eval_batch):
        batch = np.stack(full[i:i + eval_batch])
        logits = logits_for(batch[:, :-1])
        n = batch.shape[0] * (window - 1)
        total_nll += float(cross_entropy(logits, batch[:, 1:]).item()) * n
        total_count += n
    for c in tail:
        logits = logits_for(c[None, :-1])
        n = len(c) - 1
        total_nll += float(cross_entropy(logits, c[None, 1:]).item()) * n
        total_count += n
    return float(np.exp(total_nll / total_count))


def throughput(model: Model, prompt, n_tokens: int,
               exit_layer: int | None = None, repeats: int = 3) -> float:
    """Median tokens/second over `repeats` greedy runs after one warm-up."""
    if repeats < 3:
        raise ValueError("throughput needs repeats >= 3")
    generate(model, prompt, n_tokens, exit_layer=exit_layer)  # warm-up
    rates = []
    for _ in range(repeats):
        res = generate(model, prompt, n_tokens, exit_layer=exit_layer)
        rates.append(n_tokens / res.elapsed_s)
    return float(np.median(rates))


@dataclass
class ExitSweepRow:
    exit_layer: int
    ppl: float
    tok_per_s: float
    ppl_delta_pct: float
    speed_gain_pct: float
    ratio: float


@dataclass
class ExitSweepReport:
    variant: str
    layer_count: int
    rows: list

    def row_for(self, exit_layer: int) -> ExitSweepRow:
        for r in self.rows:
            if r.exit_layer == exit_layer:
                return r
        raise ReportError(f"no row for exit layer {exit_layer}")

    @property
    def full_row(self) -> ExitSweepRow:
        return self.row_for(self.layer_count)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            ratio = "NA" if math.isnan(r.ratio) else repr(r.ratio)
            w.writerow([self.variant, r.exit_layer, repr(r.ppl),
                        repr(r.tok_per_s), repr(r.ppl_delta_pct),
                        repr(r.speed_gain_pct), ratio])
        text = buf.getvalue()
        if path is not None:
            _atomic_write(Path(path), text)
        return text

    @classmethod
    def from_csv(cls, path) -> "ExitSweepReport":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if header != SWEEP_COLUMNS:
                raise ReportError(f"unexpected sweep CSV header: {header}")
            rows, variant = [], None
            for rec in reader:
                variant = rec[0]
                rows.append(ExitSweepRow(
                    exit_layer=int(rec[1]), ppl=float(rec[2]),
                    tok_per_s=float(rec[3]), ppl_delta_pct=float(rec[4]),
                    speed_gain_pct=float(rec[5]),
                    ratio=math.nan if rec[6] == "NA" else float(rec[6])))
        if not rows:
            raise ReportError(f"{path}: empty sweep CSV")
        return cls(variant=variant, layer_count=max(r.exit_layer for r in rows),
                   rows=rows)


def sweep_deltas(ppl_k: float, tok_k: float, ppl_full: float,
                 tok_full: float) -> tuple[float, float, float]:
    dppl = (ppl_k / ppl_full - 1.0) * 100.0
    dspeed = (tok_k / tok_full - 1.0) * 100.0
    return dppl, dspeed, quality_speed_ratio(dppl, dspeed)


def exit_sweep(model: Model, corpus, exit_layers, variant: str | None = None,
               prompt=None, n_tokens: int = 32, repeats: int = 3,
               eval_batch: int = 16) -> ExitSweepReport:
    """Quality/speed table over the requested exit layers (must include L)."""
    L = model.cfg.layers
    exit_layers = sorted(set(int(k) for k in exit_layers))
    if any(not 1 <= k <= L for k in exit_layers):
        raise ReportError(f"exit layers must lie in 1..{L}")
    if L not in exit_layers:
        raise ReportError("exit sweep requires the full-model row (layer L)")
    ids = _corpus_ids(corpus)
    if prompt is None:
        prompt = ids[:min(16, len(ids))].tolist()

    measured = {}
    for k in exit_layers:
        ppl = perplexity(model, ids, exit_layer=k, eval_batch=eval_batch)
        tok = throughput(model, prompt, n_tokens, exit_layer=k, repeats=repeats)
        measured[k] = (ppl, tok)

    ppl_full, tok_full = measured[L]
    rows = []
    for k in exit_layers:
        ppl, tok = measured[k]
        dppl, dspeed, ratio = sweep_deltas(ppl, tok, ppl_full, tok_full)
        if k == L:
            dppl, dspeed, ratio = 0.0, 0.0, math.nan
        rows.append(ExitSweepRow(exit_layer=k, ppl=ppl, tok_per_s=tok,
                                 ppl_delta_pct=dppl, speed_gain_pct=dspeed,
                                 ratio=ratio))
    return ExitSweepReport(variant=variant or model.cfg.variant.name,
                           layer_count=L, rows=rows)


@dataclass
class VarianceProfile:
    variant: str
    stds: list   # (layer, std) pairs, layer 1..L

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(VARIANCE_COLUMNS)
        for layer, std in self.stds:
            w.writerow([self.variant, layer, repr(std)])
        text = buf.getvalue()
        if path is not None:
            _atomic_write(Path(path), text)
        return text

    @classmethod
    def from_csv(cls, path) -> "VarianceProfile":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if header != VARIANCE_COLUMNS:
                raise ReportError(f"unexpected variance CSV header: {header}")
            stds, variant = [], None
            for rec in reader:
                variant = rec[0]
                stds.append((int(rec[1]), float(rec[2])))
        return cls(variant=variant, stds=stds)


def variance_profile(model: Model, probe_tokens,
                     variant: str | None = None) -> VarianceProfile:
    """Population std of each layer's post-block state over a probe batch."""
    probe_tokens = np.asarray(probe_tokens)
    if probe_tokens.size == 0:
        raise ReportError("probe batch is empty")
    trace = forward_full(model, probe_tokens, phase="infer")
    stds = []
    for l, h in enumerate(trace.hidden, start=1):
        stds.append((l, float(np.std(h.data.astype(np.float64)))))
    return VarianceProfile(variant=variant or model.cfg.variant.name, stds=stds)


# ---------------------------------------------------------------------------
# cross-variant comparison


@dataclass
class ComparisonRow:
    variant: str
    full_ppl: float
    full_tok_per_s: float
    quality_rank: int
    speed_rank: int
    ppl_delta_pct_3l4: float
    exit_viability: str
    quality_speed_ratio_3l4: float


@dataclass
class ComparisonTable:
    rows: list
    viability_layer: int

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COMPARE_COLUMNS)
        for r in self.rows:
            ratio = ("NA" if math.isnan(r.quality_speed_ratio_3l4)
                     else repr(r.quality_speed_ratio_3l4))
            w.writerow([r.variant, repr(r.full_ppl), repr(r.full_tok_per_s),
                        r.quality_rank, r.speed_rank,
                        repr(r.ppl_delta_pct_3l4), r.exit_viability, ratio])
        text = buf.getvalue()
        if path is not None:
            _atomic_write(Path(path), text)
        return text

    def format(self) -> str:
        head = (f"{'variant':<10} {'ppl':>10} {'tok/s':>9} {'q-rank':>6} "
                f"{'s-rank':>6} {'delta@3L/4':>11} {'viability':>10} {'ratio':>7}")
        lines = [head, "-" * len(head)]
        for r in self.rows:
            ratio = "NA" if math.isnan(r.quality_speed_ratio_3l4) else (
                f"{r.quality_speed_ratio_3l4:.2f}")
            lines.append(
                f"{r.variant:<10} {r.full_ppl:>10.4g} {r.full_tok_per_s:>9.3g} "
                f"{r.quality_rank:>6} {r.speed_rank:>6} "
                f"{r.ppl_delta_pct_3l4:>10.2f}% {r.exit_viability:>10} {ratio:>7}")
        return "\n".join(lines)


def compare_variants(reports: dict) -> ComparisonTable:
    """Rank variants by full-model quality and speed, flag exit viability.

    Viability is judged at the 3L/4 exit: ppl_delta_pct <= 10 is
    "excellent", anything worse is "poor". PPL ties within 1e-9 are broken
    by the speed ranking.
    """
    if len(reports) < 2:
        raise ReportError("compare_variants needs at least two reports")
    layer_sets = {name: tuple(r.exit_layer for r in rep.rows)
                  for name, rep in reports.items()}
    if len(set(layer_sets.values())) != 1:
        raise ReportError(f"exit-layer sets differ between reports: {layer_sets}")
    layer_counts = {rep.layer_count for rep in reports.values()}
    if len(layer_counts) != 1:
        raise ReportError("reports disagree on the full-model layer count")
    L = layer_counts.pop()
    k34 = int(round(3 * L / 4))

    names = list(reports)
    speed_order = sorted(
        names, key=lambda n: (-reports[n].full_row.tok_per_s, n))
    speed_rank = {n: i + 1 for i, n in enumerate(speed_order)}
    quality_order = sorted(
        names, key=lambda n: (round(reports[n].full_row.ppl / 1e-9) * 1e-9,
                              speed_rank[n]))
    quality_rank = {n: i + 1 for i, n in enumerate(quality_order)}

    rows = []
    for n in quality_order:
        rep = reports[n]
        at = rep.row_for(k34)
        viability = ("excellent" if at.ppl_delta_pct <= VIABILITY_DELTA_PCT
                     else "poor")
        rows.append(ComparisonRow(
            variant=n, full_ppl=rep.full_row.ppl,
            full_tok_per_s=rep.full_row.tok_per_s,
            quality_rank=quality_rank[n], speed_rank=speed_rank[n],
            ppl_delta_pct_3l4=at.ppl_delta_pct, exit_viability=viability,
            quality_speed_ratio_3l4=at.ratio))
    return ComparisonTable(rows=rows, viability_layer=k34)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
