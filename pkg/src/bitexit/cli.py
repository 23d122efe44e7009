"""Command-line shell: train / eval / sweep / profile / gen / compare.

Exit codes: 0 success, 1 usage error, 2 configuration or validation error,
3 runtime failure (I/O, corrupt checkpoint, bad corpus).
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, evalbench
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, load_config
from .evalbench import (ExitSweepReport, ReportError, compare_variants,
                        exit_sweep, perplexity, variance_profile)
from .hadamard import TransformSizeError
from .model import UnknownVariantError, build_model, generate
from .tokenizer import CorpusError, detokenize, load_corpus
from .training import AdamW, train

SIGN_CONVENTION = ("ppl_delta_pct is a signed increase: positive means the "
                   "exit is worse than the full model (a published '-4.0% "
                   "decrease' appears here as +4.0)")


def _version_string() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"],
                              capture_output=True, text=True, timeout=5,
                              cwd=Path(__file__).parent)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+g{desc.stdout.strip()}"
    except OSError:
        pass
    return __version__


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


class _Run:
    """Output directory <outdir>/<name>/ with a manifest written on close."""

    def __init__(self, rc, command: str):
        self.rc = rc
        name = rc["name"] or f"{rc['variant']}-{command}"
        self.dir = Path(rc["outdir"]) / name
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "reports").mkdir(exist_ok=True)
        self.fields = {
            "command": command,
            "run_name": name,
            "version": _version_string(),
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "seed": rc["seed"],
            "cpu_count": os.cpu_count(),
            "numpy": np.__version__,
            "sign_convention": SIGN_CONVENTION,
            "tokenizer": "byte-level, vocab 259 (256 bytes + BOS/EOS/PAD)",
        }
        _atomic_write(self.dir / "config.resolved", rc.resolved_text())

    def note(self, **kw):
        self.fields.update(kw)

    def close(self):
        self.fields["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        lines = [f"{k} = {v}" for k, v in self.fields.items()]
        lines += [f"config.{k} = {v}" for k, v in sorted(self.rc.values.items())]
        _atomic_write(self.dir / "manifest.txt", "\n".join(str(x) for x in lines) + "\n")


def _load_model(args):
    model, opt_state, step = load_checkpoint(
        args.checkpoint, expected_variant=getattr(args, "variant", None))
    return model, opt_state, step


def _rc_from_args(args):
    """Resolve a RunConfig from --config, --set, and convenience flags."""
    overrides = list(args.set or [])
    flag_map = [("outdir", "outdir"), ("name", "name"), ("seed", "seed"),
                ("variant", "variant"), ("corpus", "corpus"),
                ("steps", "train.max_steps")]
    for flag, key in flag_map:
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append(f"{key}={val}")
    return load_config(args.config, overrides)


def _default_exit_layers(L: int) -> list[int]:
    ks = sorted({max(1, round(L * f)) for f in (0.25, 0.5, 0.75, 1.0)})
    if L not in ks:
        ks.append(L)
    return ks


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    rc = _rc_from_args(args)
    if not rc["corpus"]:
        raise ConfigError("train requires a corpus (--corpus or corpus=...)")

    model_cfg = rc.model_config()
    train_cfg = rc.train_config()
    corpus = load_corpus(rc["corpus"])
    run = _Run(rc, "train")
    run.note(corpus_path=rc["corpus"], corpus_bytes=corpus.byte_count,
             corpus_tokens=len(corpus),
             phase=2 if rc["train.early_exit"] else 1)

    model = build_model(model_cfg)
    optimizer = AdamW(model.params, weight_decay=train_cfg.weight_decay)
    log = train(model, corpus, train_cfg,
                early_exit=rc["train.early_exit"], out_dir=run.dir,
                log_every=rc["train.log_every"],
                checkpoint_every=rc["train.checkpoint_every"],
                optimizer=optimizer)
    final = log.records[-1].breakdown
    run.note(final_checkpoint=log.final_checkpoint, loss_csv=log.csv_path,
             final_total_loss=final.total, final_main_loss=final.main_loss)
    run.close()
    print(f"trained {train_cfg.max_steps} steps; final loss "
          f"{final.total:.4f} (main {final.main_loss:.4f})")
    print(f"checkpoint: {log.final_checkpoint}")
    print(f"loss csv:   {log.csv_path}")
    return 0


def cmd_eval(args) -> int:
    rc = _rc_from_args(args)
    model, _, step = _load_model(args)
    corpus = load_corpus(args.corpus)
    run = _Run(rc, "eval")
    ppl = perplexity(model, corpus, exit_layer=args.exit_layer)
    layer = args.exit_layer or model.cfg.layers
    run.note(checkpoint=args.checkpoint, checkpoint_step=step,
             exit_layer=layer, ppl=ppl, corpus_path=args.corpus)
    run.close()
    print(f"perplexity at layer {layer}: {ppl:.4f}")
    return 0


def cmd_sweep(args) -> int:
    rc = _rc_from_args(args)
    model, _, _ = _load_model(args)
    corpus = load_corpus(args.corpus)
    ids = corpus.ids[:args.eval_tokens] if args.eval_tokens else corpus.ids
    if args.exit_layers:
        layers = [int(x) for x in args.exit_layers.split(",")]
    else:
        layers = _default_exit_layers(model.cfg.layers)
    run = _Run(rc, "sweep")
    report = exit_sweep(model, ids, layers, n_tokens=args.n_tokens,
                        repeats=args.repeats)
    path = run.dir / "reports" / "sweep.csv"
    report.to_csv(path)
    run.note(checkpoint=args.checkpoint, sweep_csv=path,
             exit_layers=",".join(map(str, layers)))
    run.close()
    print(report.to_csv().rstrip())
    print(f"# {SIGN_CONVENTION}")
    print(f"wrote {path}")
    return 0


def cmd_profile(args) -> int:
    rc = _rc_from_args(args)
    model, _, _ = _load_model(args)
    corpus = load_corpus(args.corpus)
    seq = min(args.probe_seq, model.cfg.max_seq_len)
    need = args.probe_batch * seq
    if len(corpus) < need:
        raise CorpusError(f"corpus too small for a {args.probe_batch}x{seq} probe")
    probe = corpus.ids[:need].reshape(args.probe_batch, seq)
    run = _Run(rc, "profile")
    prof = variance_profile(model, probe)
    path = run.dir / "reports" / "variance.csv"
    prof.to_csv(path)
    run.note(checkpoint=args.checkpoint, variance_csv=path)
    run.close()
    print(prof.to_csv().rstrip())
    print(f"wrote {path}")
    return 0


def cmd_gen(args) -> int:
    rc = _rc_from_args(args)
    model, _, _ = _load_model(args)
    prompt = list(args.prompt.encode("utf-8"))
    res = generate(model, prompt, args.n, exit_layer=args.exit_layer)
    text = detokenize(res.tokens).decode("utf-8", errors="replace")
    rate = args.n / res.elapsed_s
    run = _Run(rc, "gen")
    run.note(checkpoint=args.checkpoint, n_tokens=args.n,
             exit_layer=args.exit_layer or model.cfg.layers,
             tok_per_s=rate, truncated=res.truncated)
    run.close()
    print(text)
    print(f"[{rate:.2f} tok/s over {args.n} tokens"
          + (", window truncated" if res.truncated else "") + "]")
    return 0


def cmd_compare(args) -> int:
    rc = _rc_from_args(args)
    reports = {}
    for path in args.sweeps:
        rep = ExitSweepReport.from_csv(path)
        reports[rep.variant] = rep
    table = compare_variants(reports)
    run = _Run(rc, "compare")
    path = run.dir / "reports" / "compare.csv"
    table.to_csv(path)
    run.note(inputs=";".join(args.sweeps), compare_csv=path,
             viability_layer=table.viability_layer)
    run.close()
    print(table.format())
    print(f"# {SIGN_CONVENTION}")
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bitexit",
                                description="quantized early-exit transformer lab")
    p.add_argument("--version", action="version", version=_version_string())
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key")
        sp.add_argument("--outdir", default=None)
        sp.add_argument("--name", default=None, help="run directory name")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("train", help="train a variant from scratch")
    common(sp)
    sp.add_argument("--variant", default=None,
                    help="v1 | v2 | v3 | baseline")
    sp.add_argument("--corpus", default=None, help="UTF-8 text file")
    sp.add_argument("--steps", type=int, default=None,
                    help="shorthand for train.max_steps")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="perplexity of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--variant", default=None,
                    help="reject the checkpoint unless it is this variant")
    sp.add_argument("--exit-layer", type=int, default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="exit-layer quality/speed sweep")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--exit-layers", default=None,
                    help="comma list, e.g. 2,4,6,8 (default L/4..L)")
    sp.add_argument("--n-tokens", type=int, default=32)
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--eval-tokens", type=int, default=None,
                    help="evaluate perplexity on the first N tokens only")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("profile", help="per-layer activation variance")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--probe-batch", type=int, default=4)
    sp.add_argument("--probe-seq", type=int, default=128)
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("gen", help="greedy generation from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--n", type=int, default=64)
    sp.add_argument("--exit-layer", type=int, default=None)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("compare", help="rank variants from sweep CSVs")
    common(sp)
    sp.add_argument("sweeps", nargs="+", help="sweep CSV files")
    sp.set_defaults(func=cmd_compare)
    return p


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except (ConfigError, UnknownVariantError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (CheckpointError, CorpusError, ReportError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 3
    except (ValueError, TransformSizeError) as e:
        print(f"invalid request: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
