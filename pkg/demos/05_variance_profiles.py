#!/usr/bin/env python3
"""Activation-variance profiles: does the Hadamard rotation flatten them?

Trains a Hadamard and a non-Hadamard ternary variant briefly from the same
seed and prints each layer's residual-stream standard deviation as an
ASCII profile. Short runs only sketch the trend; the acceptance suite does
the full paired 2000-step comparison.
"""

from pathlib import Path

import numpy as np

from bitexit.evalbench import variance_profile
from bitexit.layers import DropoutSchedule
from bitexit.model import VARIANTS, ModelConfig, build_model
from bitexit.tokenizer import load_corpus
from bitexit.training import TrainConfig, train

CORPUS = Path(__file__).resolve().parent.parent / "data" / "sample_corpus.txt"


def cfg_for(variant):
    return ModelConfig(layers=4, hidden=64, heads=4, kv_heads=2, ffn_dim=128,
                       vocab_size=259, max_seq_len=48,
                       schedule=DropoutSchedule(0.5, "raw", 4),
                       variant=VARIANTS[variant], seed=11)


def main():
    corpus = load_corpus(CORPUS)
    probe = corpus.ids[:8 * 48].reshape(8, 48)
    train_cfg = TrainConfig(lr_peak=1e-3, warmup_steps=30, max_steps=200,
                            batch_size=4, grad_accum_steps=1, seed=11)

    profiles = {}
    for variant in ("v1", "v3"):
        model = build_model(cfg_for(variant))
        print(f"training {variant} ({'with' if variant == 'v3' else 'no'} "
              f"Hadamard) for {train_cfg.max_steps} steps ...")
        train(model, corpus, train_cfg, early_exit=True)
        profiles[variant] = variance_profile(model, probe)

    scale = max(s for p in profiles.values() for _, s in p.stds)
    print("\nper-layer std of the residual stream (probe batch):")
    for variant, prof in profiles.items():
        print(f"  {variant}:")
        for layer, s in prof.stds:
            bar = "#" * int(round(40 * s / scale))
            print(f"    layer {layer}: {s:7.4f} {bar}")
    v1_last = profiles["v1"].stds[-1][1]
    v3_last = profiles["v3"].stds[-1][1]
    cmp = "lower" if v3_last < v1_last else "NOT lower"
    print(f"\nfinal-layer std: hadamard {v3_last:.4f} vs plain {v1_last:.4f} "
          f"-> hadamard variant is {cmp} here")


if __name__ == "__main__":
    main()
