#!/usr/bin/env python3
"""Regenerate data/sample_corpus.txt, the bundled smoke-test corpus.

Produces ~200KB of deterministic, synthetic English-like micro-stories
(blank-line-separated paragraphs). Synthetic text keeps the repository
self-contained: no download step, no licensing questions, and the byte
distribution is simple enough that a tiny model learns it quickly.
"""

import random
from pathlib import Path

TARGET_BYTES = 200_000
SEED = 20240601

NAMES = ["mira", "tom", "ana", "ben", "lila", "sam", "nora", "finn",
         "ada", "leo", "ruth", "omar"]
NOUNS = ["river", "lantern", "garden", "boat", "mountain", "letter", "clock",
         "bridge", "kite", "stone", "market", "forest", "song", "map", "well",
         "tower", "field", "star", "cart", "bell"]
ADJS = ["small", "quiet", "bright", "old", "green", "heavy", "warm", "lost",
        "golden", "distant", "gentle", "crooked", "silver", "busy"]
VERBS = ["found", "carried", "watched", "painted", "followed", "mended",
         "counted", "traded", "crossed", "remembered", "built", "opened"]
PLACES = ["by the sea", "near the hill", "in the valley", "under the oak",
          "at the edge of town", "beside the mill", "along the road"]
TIMES = ["one morning", "that evening", "in early spring", "after the rain",
         "before sunrise", "at the end of summer"]

SENTENCES = [
    "{Time}, {name} {verb} the {adj} {noun} {place}.",
    "The {noun} was {adj}, and {name} smiled.",
    "{Name} and {name2} {verb} a {adj} {noun} together.",
    "Nobody knew why the {noun} stood {place}.",
    "{Name} said, \"the {noun} is {adj}, but it is ours.\"",
    "Every day the {adj} {noun} waited {place}.",
    "{Time}, the {noun} seemed {adj2} and almost {adj}.",
    "So {name} {verb} it, slowly, until the {noun2} shone.",
    "It was not the first {noun}, and it would not be the last.",
    "{Name} wrote about the {noun} in a {adj} notebook.",
]


def sentence(rng):
    name, name2 = rng.sample(NAMES, 2)
    tpl = rng.choice(SENTENCES)
    s = tpl.format(
        name=name, name2=name2, Name=name.capitalize(),
        noun=rng.choice(NOUNS), noun2=rng.choice(NOUNS),
        adj=rng.choice(ADJS), adj2=rng.choice(ADJS),
        verb=rng.choice(VERBS), place=rng.choice(PLACES),
        time=rng.choice(TIMES), Time=rng.choice(TIMES).capitalize())
    return s


def main():
    rng = random.Random(SEED)
    paragraphs = []
    size = 0
    while size < TARGET_BYTES:
        para = " ".join(sentence(rng) for _ in range(rng.randint(3, 6)))
        paragraphs.append(para)
        size += len(para) + 2
    text = "\n\n".join(paragraphs) + "\n"
    out = Path(__file__).resolve().parent.parent / "data" / "sample_corpus.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    print(f"wrote {out} ({out.stat().st_size} bytes, {len(paragraphs)} paragraphs)")


if __name__ == "__main__":
    main()
