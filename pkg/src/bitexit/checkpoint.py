"""Binary checkpoint persistence with a bit-exact round trip.

Little-endian layout:
    magic "BXTCKPT\\0" | u32 version | u64 header length | header JSON
    | u32 tensor count | tensor records
Each tensor record is u32 name length, utf-8 name, u32 rank, u64 dims,
then raw little-endian float32 data. Optimizer moments are stored beside
the parameters under "adam.m.<name>" / "adam.v.<name>".
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .layers import DropoutSchedule
from .model import Model, ModelConfig, build_model, variant_from_name

MAGIC = b"BXTCKPT\x00"
VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


def _config_header(model: Model, step: int, adam_t: int) -> dict:
    cfg = model.cfg
    return {
        "format": "bitexit-checkpoint",
        "step": int(step),
        "adam_t": int(adam_t),
        "variant": cfg.variant.name,
        "model": {
            "layers": cfg.layers, "hidden": cfg.hidden, "heads": cfg.heads,
            "kv_heads": cfg.kv_heads, "ffn_dim": cfg.ffn_dim,
            "vocab_size": cfg.vocab_size, "max_seq_len": cfg.max_seq_len,
            "seed": cfg.seed,
            "schedule": {"p_max": cfg.schedule.p_max, "mode": cfg.schedule.mode},
        },
    }


def config_from_header(header: dict) -> ModelConfig:
    m = header["model"]
    return ModelConfig(
        layers=m["layers"], hidden=m["hidden"], heads=m["heads"],
        kv_heads=m["kv_heads"], ffn_dim=m["ffn_dim"],
        vocab_size=m["vocab_size"], max_seq_len=m["max_seq_len"],
        schedule=DropoutSchedule(m["schedule"]["p_max"], m["schedule"]["mode"],
                                 m["layers"]),
        variant=variant_from_name(header["variant"]), seed=m["seed"])


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    parts = [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
    parts += [struct.pack("<Q", d) for d in arr.shape]
    parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, optimizer_state: dict | None, step: int, path) -> None:
    adam_t = int(optimizer_state["t"]) if optimizer_state else 0
    header = json.dumps(_config_header(model, step, adam_t),
                        sort_keys=True).encode("utf-8")
    tensors: list[tuple[str, np.ndarray]] = list(
        (k, v.data) for k, v in model.params.items())
    if optimizer_state:
        for k in model.params:
            tensors.append((f"adam.m.{k}", optimizer_state["m"][k]))
            tensors.append((f"adam.v.{k}", optimizer_state["v"][k]))

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            f.write(_pack_tensor(name, arr))
    tmp.replace(path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def read_header(path) -> dict:
    """Parse and return just the JSON header of a checkpoint."""
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        return json.loads(r.take(r.u64()).decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e


def load_checkpoint(path, expected_variant: str | None = None):
    """Rebuild (model, optimizer_state | None, step) from a checkpoint file."""
    path = Path(path)
    blob = path.read_bytes()
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(r.take(r.u64()).decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e

    if expected_variant is not None:
        want = expected_variant.strip().lower()
        if header["variant"] != want:
            raise CheckpointError(
                f"{path}: variant mismatch, checkpoint is {header['variant']!r} "
                f"but {want!r} was requested")

    try:
        cfg = config_from_header(header)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid model config: {e}") from e

    count = r.u32()
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u64() for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        arrays[name] = np.ascontiguousarray(data)
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after tensor records")

    model = build_model(cfg)
    for name, p in model.params.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {arrays[name].shape}, "
                f"config expects {p.data.shape}")
        p.data = arrays[name].copy()

    optimizer_state = None
    if any(k.startswith("adam.m.") for k in arrays):
        optimizer_state = {"t": int(header.get("adam_t", 0)), "m": {}, "v": {}}
        for name, p in model.params.items():
            for slot in ("m", "v"):
                key = f"adam.{slot}.{name}"
                if key not in arrays:
                    raise CheckpointError(f"{path}: missing optimizer moment {key!r}")
                if arrays[key].shape != p.data.shape:
                    raise CheckpointError(f"{path}: moment {key!r} shape mismatch")
                optimizer_state[slot][name] = arrays[key].copy()
    return model, optimizer_state, int(header["step"])
