"""Deterministic toy sentiment corpora for smoke runs and desk experiments.

Sentences are filler words drawn from a Zipf-like distribution with a few
polarity cue words inserted. The label is the majority polarity of the
cues, flipped with probability ``label_noise``. An out-of-domain unlabeled
pool uses a disjoint filler vocabulary.
"""

from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np

from .data import write_jsonl

POSITIVE = (
    "good great excellent wonderful superb delightful brilliant enjoyable charming "
    "moving fantastic memorable beautiful clever touching"
).split()
NEGATIVE = (
    "bad awful terrible boring dull poor weak tedious clumsy bland "
    "painful forgettable messy lifeless annoying"
).split()
LABELS = ("negative", "positive")


def filler_words(n: int, family: str = "in") -> list[str]:
    consonants = "bdfgklmnprstvz" if family == "in" else "chjqwxy"
    vowels = "aeiou" if family == "in" else "aeiouy"
    words = ("".join(p) for p in itertools.product(consonants, vowels, consonants, vowels))
    return list(itertools.islice(words, n))


def _sentence(rng, fillers, probs, min_len, max_len, label_noise):
    length = int(rng.integers(min_len, max_len + 1))
    words = list(rng.choice(fillers, size=length, p=probs))
    polarity = int(rng.integers(0, 2))
    n_cues = int(rng.integers(1, 4))
    n_against = 1 if n_cues == 3 and rng.random() < 0.5 else 0
    cues = [polarity] * (n_cues - n_against) + [1 - polarity] * n_against
    positions = rng.choice(length, size=n_cues, replace=False)
    for pos, pol in zip(sorted(positions), cues):
        words[pos] = str(rng.choice(POSITIVE if pol else NEGATIVE))
    label = polarity if rng.random() >= label_noise else 1 - polarity
    return " ".join(words), label


def generate(
    n: int,
    seed: int,
    *,
    family: str = "in",
    vocab_size: int = 400,
    min_len: int = 6,
    max_len: int = 24,
    label_noise: float = 0.05,
) -> list[tuple[str, int]]:
    rng = np.random.default_rng(seed)
    fillers = filler_words(vocab_size, family)
    ranks = np.arange(1, len(fillers) + 1, dtype=float)
    probs = (1.0 / ranks) / np.sum(1.0 / ranks)
    return [_sentence(rng, fillers, probs, min_len, max_len, label_noise) for _ in range(n)]


def write_corpus(
    directory,
    n_train: int = 2000,
    n_valid: int = 400,
    n_test: int = 600,
    n_unlabeled: int = 2000,
    seed: int = 0,
    unlabeled_domain: str = "out",
    label_noise: float = 0.05,
) -> Path:
    """Write train/valid/test/unlabeled jsonl files into ``directory``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    labeled = generate(n_train + n_valid + n_test, seed, label_noise=label_noise)
    splits = {
        "train": labeled[:n_train],
        "valid": labeled[n_train : n_train + n_valid],
        "test": labeled[n_train + n_valid :],
    }
    for name, rows in splits.items():
        write_jsonl(root / f"{name}.jsonl", ({"text": t, "label": LABELS[y]} for t, y in rows))
    if n_unlabeled:
        family = "out" if unlabeled_domain == "out" else "in"
        pool = generate(n_unlabeled, seed + 7919, family=family, label_noise=0.0)
        write_jsonl(root / "unlabeled.jsonl", ({"text": t} for t, _ in pool))
    return root
