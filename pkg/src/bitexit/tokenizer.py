"""Byte-level tokenizer and the training batch stream.

Byte value b maps straight to id b; BOS=256, EOS=257, PAD=258 (vocab 259).
Blank-line-separated documents are wrapped in BOS/EOS, with the separator
bytes kept inside the preceding document so detokenize(tokenize(x)) == x
for arbitrary input.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259

_DOC_BREAK = re.compile(rb"\n[ \t\r]*\n[\n \t\r]*")


class CorpusError(ValueError):
    pass


@dataclass
class Corpus:
    ids: np.ndarray        # int32 token ids
    vocab_size: int
    source: str | None
    byte_count: int

    def __len__(self):
        return int(self.ids.size)


def tokenize(data: bytes, source: str | None = None) -> Corpus:
    if not isinstance(data, (bytes, bytearray)):
        raise TypeError("tokenize expects bytes")
    data = bytes(data)
    pieces = []
    start = 0
    # A document ends after each blank-line run; the run's bytes stay inside it.
    breaks = [m.end() for m in _DOC_BREAK.finditer(data)]
    for end in breaks + ([len(data)] if start != len(data) else []):
        if end <= start:
            continue
        doc = np.frombuffer(data[start:end], dtype=np.uint8).astype(np.int32)
        pieces.append(np.concatenate(([BOS], doc, [EOS])).astype(np.int32))
        start = end
    ids = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.int32)
    return Corpus(ids=ids, vocab_size=VOCAB_SIZE, source=source,
                  byte_count=len(data))


def detokenize(ids) -> bytes:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= VOCAB_SIZE):
        raise CorpusError(f"token id outside vocabulary of {VOCAB_SIZE}")
    keep = ids[ids < 256].astype(np.uint8)
    return keep.tobytes()


def load_corpus(path) -> Corpus:
    p = Path(path)
    corpus = tokenize(p.read_bytes(), source=str(p))
    if len(corpus) == 0:
        raise CorpusError(f"corpus {p} is empty")
    return corpus


def windows_for_step(corpus: Corpus, batch: int, seq: int, seed: int, step: int):
    """The step'th batch of random contiguous windows, stateless in `step`.

    Returns (inputs [batch, seq], targets [batch, seq]); targets are inputs
    shifted one position left. Deterministic in (seed, step), so training
    can resume mid-run without replaying the stream.
    """
    n = len(corpus)
    if n < batch * (seq + 1):
        raise CorpusError(
            f"corpus of {n} tokens too small for batch={batch}, seq={seq}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(step,)))
    offsets = rng.integers(0, n - seq, size=batch)
    windows = np.stack([corpus.ids[o:o + seq + 1] for o in offsets])
    return windows[:, :-1].astype(np.int64), windows[:, 1:].astype(np.int64)


def batch_stream(corpus: Corpus, batch: int, seq: int, seed: int):
    """Endless iterator of seeded random training windows."""
    step = 0
    while True:
        yield windows_for_step(corpus, batch, seq, seed, step)
        step += 1
