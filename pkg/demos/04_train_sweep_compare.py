#!/usr/bin/env python3
"""A miniature end-to-end study: train two variants, sweep exits, compare.

Uses a deliberately tiny model (2 layers, d=64) and few steps so the whole
script finishes in about a minute; the full-size desk recipe lives in the
acceptance suite and the CLI. Writes CSVs under demos/out/.
"""

from pathlib import Path

import numpy as np

from bitexit.evalbench import compare_variants, exit_sweep
from bitexit.layers import DropoutSchedule
from bitexit.model import VARIANTS, ModelConfig, build_model
from bitexit.tokenizer import load_corpus
from bitexit.training import TrainConfig, train

HERE = Path(__file__).resolve().parent
OUT = HERE / "out"
CORPUS = HERE.parent / "data" / "sample_corpus.txt"


def tiny_cfg(variant):
    return ModelConfig(layers=2, hidden=64, heads=4, kv_heads=2, ffn_dim=128,
                       vocab_size=259, max_seq_len=48,
                       schedule=DropoutSchedule(0.5, "raw", 2),
                       variant=VARIANTS[variant], seed=0)


def main():
    corpus = load_corpus(CORPUS)
    eval_ids = corpus.ids[:6000]
    train_cfg = TrainConfig(lr_peak=2e-3, warmup_steps=40, max_steps=300,
                            batch_size=4, grad_accum_steps=1, seed=0)

    reports = {}
    for variant in ("v1", "baseline"):
        print(f"training {variant} for {train_cfg.max_steps} steps ...")
        model = build_model(tiny_cfg(variant))
        log = train(model, corpus, train_cfg, early_exit=True)
        print(f"  final loss {log.records[-1].breakdown.total:.3f} "
              f"(main {log.records[-1].breakdown.main_loss:.3f})")
        rep = exit_sweep(model, eval_ids, exit_layers=[1, 2],
                         n_tokens=16, repeats=3)
        OUT.mkdir(exist_ok=True)
        rep.to_csv(OUT / f"sweep_{variant}.csv")
        reports[variant] = rep
        for row in rep.rows:
            print(f"  exit {row.exit_layer}: ppl {row.ppl:8.2f}  "
                  f"{row.tok_per_s:7.1f} tok/s  delta {row.ppl_delta_pct:+6.1f}%  "
                  f"gain {row.speed_gain_pct:+6.1f}%")

    table = compare_variants(reports)
    print()
    print(table.format())
    table.to_csv(OUT / "compare.csv")
    print(f"\nCSV reports in {OUT}/")


if __name__ == "__main__":
    main()
