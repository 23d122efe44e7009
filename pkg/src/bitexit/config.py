"""Run configuration: built-in defaults < config file < command-line overrides.

The file format is flat `key = value` lines with `#` comments. Keys are
dotted (model.layers, train.lr_peak). Unknown keys are errors, not
warnings. Three training keys default per variant: the 4-bit variant (v2)
trains with a lower peak LR, longer warmup, and tighter clipping.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .layers import DropoutSchedule
from .model import ModelConfig, variant_from_name
from .training import TrainConfig


class ConfigError(ValueError):
    pass


_VARIANT_DEPENDENT = object()

# key -> (type, default)
KEY_SPECS = {
    "name": (str, ""),
    "variant": (str, "v1"),
    "corpus": (str, ""),
    "outdir": (str, "runs"),
    "seed": (int, 0),
    "model.layers": (int, 8),
    "model.hidden": (int, 256),
    "model.heads": (int, 8),
    "model.kv_heads": (int, 2),
    "model.ffn_dim": (int, 512),
    "model.vocab_size": (int, 259),
    "model.max_seq_len": (int, 256),
    "model.dropout_mode": (str, "raw"),
    "train.lr_peak": (float, _VARIANT_DEPENDENT),
    "train.warmup_steps": (int, _VARIANT_DEPENDENT),
    "train.max_steps": (int, 50_000),
    "train.batch_size": (int, 16),
    "train.grad_accum_steps": (int, 4),
    "train.weight_decay": (float, 0.1),
    "train.clip_norm": (float, _VARIANT_DEPENDENT),
    "train.lambda": (float, 0.3),
    "train.p_max": (float, 0.5),
    "train.early_exit": (bool, True),
    "train.log_every": (int, 10),
    "train.checkpoint_every": (int, 1000),
}

_VARIANT_DEFAULTS = {
    # (lr_peak, warmup_steps, clip_norm): 8-bit recipe vs 4-bit recipe
    "v2": (3e-4, 4000, 0.5),
    "_other": (6e-4, 1000, 1.0),
}


def _parse_value(key: str, raw: str):
    typ, _ = KEY_SPECS[key]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return typ(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from e


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in KEY_SPECS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        pairs[key] = _parse_value(key, raw)
    return pairs


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def model_config(self) -> ModelConfig:
        v = self.values
        try:
            variant = variant_from_name(v["variant"])
            schedule = DropoutSchedule(p_max=v["train.p_max"],
                                       mode=v["model.dropout_mode"],
                                       layer_count=v["model.layers"])
            return ModelConfig(
                layers=v["model.layers"], hidden=v["model.hidden"],
                heads=v["model.heads"], kv_heads=v["model.kv_heads"],
                ffn_dim=v["model.ffn_dim"], vocab_size=v["model.vocab_size"],
                max_seq_len=v["model.max_seq_len"], schedule=schedule,
                variant=variant, seed=v["seed"])
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            lr_peak=v["train.lr_peak"], warmup_steps=v["train.warmup_steps"],
            max_steps=v["train.max_steps"], batch_size=v["train.batch_size"],
            grad_accum_steps=v["train.grad_accum_steps"],
            weight_decay=v["train.weight_decay"], clip_norm=v["train.clip_norm"],
            lam=v["train.lambda"], p_max=v["train.p_max"], seed=v["seed"])

    def resolved_text(self) -> str:
        lines = [f"{k} = {_format_value(self.values[k])}"
                 for k in sorted(self.values)]
        return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_config(path=None, overrides=None) -> RunConfig:
    """Resolve defaults, then the config file, then overrides, in that order."""
    values = {k: d for k, (_, d) in KEY_SPECS.items()}
    explicit = set()

    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        file_pairs = parse_config_text(p.read_text(), origin=str(p))
        values.update(file_pairs)
        explicit |= set(file_pairs)

    if overrides:
        if isinstance(overrides, dict):
            items = overrides.items()
        else:
            items = []
            for entry in overrides:
                if "=" not in entry:
                    raise ConfigError(f"override must be key=value, got {entry!r}")
                k, raw = entry.split("=", 1)
                items.append((k.strip(), raw))
        for k, raw in items:
            if k not in KEY_SPECS:
                raise ConfigError(f"unknown key {k!r}")
            values[k] = _parse_value(k, str(raw)) if isinstance(raw, str) else raw
            explicit.add(k)

    variant_key = ("v2" if str(values["variant"]).strip().lower() == "v2"
                   else "_other")
    lr, warmup, clip = _VARIANT_DEFAULTS[variant_key]
    if values["train.lr_peak"] is _VARIANT_DEPENDENT:
        values["train.lr_peak"] = lr
    if values["train.warmup_steps"] is _VARIANT_DEPENDENT:
        values["train.warmup_steps"] = warmup
    if values["train.clip_norm"] is _VARIANT_DEPENDENT:
        values["train.clip_norm"] = clip

    # surface an unknown variant name early
    try:
        variant_from_name(values["variant"])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return RunConfig(values=values)
