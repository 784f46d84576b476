"""Corpus helpers and a small synthetic language for desk-scale runs."""
from __future__ import annotations

from pathlib import Path

import numpy as np

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr", "kl"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]


def read_corpus(path: str | Path) -> list[str]:
    """Non-empty, stripped lines of a UTF-8 text file."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


def _stem(rng: np.random.Generator, n_syll: int) -> str:
    return "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(n_syll))


def _lexicon(rng: np.random.Generator, n: int, used: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        w = _stem(rng, int(rng.integers(1, 4)))
        if w not in used:
            used.add(w)
            out.append(w)
    return out


def synthetic_corpus(n_bytes: int = 200_000, seed: int = 0) -> list[str]:
    """Sentences from a toy grammar with agreement and selectional preferences.

    Nouns fall into classes; each class licenses its own adjectives and
    verbs, verbs agree in number with their subject through a suffix, and
    plural nouns carry a suffix too. Masked words are therefore predictable
    from context, and shared stems plus suffixes give subword structure.
    """
    rng = np.random.default_rng(seed)
    used: set[str] = set()
    n_classes = 6
    nouns = [_lexicon(rng, 12, used) for _ in range(n_classes)]
    adjs = [_lexicon(rng, 5, used) for _ in range(n_classes)]
    verbs = [_lexicon(rng, 6, used) for _ in range(n_classes)]
    obj_class = [int(rng.integers(n_classes)) for _ in range(n_classes)]
    dets_sg, dets_pl = ["the", "a", "this"], ["the", "some", "these"]
    preps = ["near", "under", "with"]

    def noun_phrase(cls: int) -> tuple[list[str], bool]:
        plural = rng.random() < 0.4
        det = rng.choice(dets_pl if plural else dets_sg)
        words = [det]
        if rng.random() < 0.6:
            words.append(rng.choice(adjs[cls]))
        noun = rng.choice(nouns[cls])
        words.append(noun + ("en" if plural else ""))
        return words, plural

    lines, size = [], 0
    while size < n_bytes:
        subj_cls = int(rng.integers(n_classes))
        words, plural = noun_phrase(subj_cls)
        verb = rng.choice(verbs[subj_cls]) + ("" if plural else "s")
        words.append(verb)
        obj_words, _ = noun_phrase(obj_class[subj_cls])
        words += obj_words
        if rng.random() < 0.3:
            words.append(rng.choice(preps))
            pp, _ = noun_phrase(int(rng.integers(n_classes)))
            words += pp
        line = " ".join(words) + " ."
        lines.append(line)
        size += len(line) + 1
    return lines
