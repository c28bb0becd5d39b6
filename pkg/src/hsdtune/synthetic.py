"""Synthetic imbalanced three-class comment corpus.

Stands in for a non-redistributable hate-speech dataset. The lexicon is fixed;
``seed`` only drives sampling, so corpora drawn with different seeds speak the
same synthetic language.
"""
from __future__ import annotations

import unicodedata
from typing import Mapping, Optional

import numpy as np

from . import CLASSES
from .preprocess import RawDocument

# Training-set class counts the default proportions follow.
TABLE_COUNTS = {"HATE": 709, "OFFENSIVE": 1022, "CLEAN": 18614}

_ONSETS = ["b", "c", "d", "đ", "g", "h", "k", "l", "m", "n", "ph", "qu", "r", "s", "t", "th", "tr", "v", "x", "ng", "nh", "ch", "kh"]
_NUCLEI = ["a", "ă", "â", "e", "ê", "i", "o", "ô", "ơ", "u", "ư", "y", "ai", "ao", "oi", "ua", "uô", "ươ", "ia"]
_CODAS = ["", "", "", "n", "ng", "m", "c", "t", "p", "nh", "ch"]
_TONES = ["", "́", "̀", "̉", "̃", "̣"]
_EMOJI = ["😀", "😂", "🤣", "😡", "👍", "❤️", "😭", "🔥", "😤", "🙄"]
_LEXICON_SEED = 20210923


def table_sizes(total: int) -> dict:
    """Class sizes proportional to the reference training distribution, summing to ``total``."""
    n = sum(TABLE_COUNTS.values())
    sizes = {c: max(1, round(total * TABLE_COUNTS[c] / n)) for c in ("HATE", "OFFENSIVE")}
    sizes["CLEAN"] = total - sizes["HATE"] - sizes["OFFENSIVE"]
    return sizes


class Lexicon:
    """Fixed synthetic vocabulary: topic words, function words, insult
    particles, target words and profanity roots with spelling variants."""

    def __init__(self, seed: int = _LEXICON_SEED):
        rng = np.random.default_rng(seed)
        seen: set = set()

        def words(n, syllables=(1, 2)):
            out = []
            while len(out) < n:
                k = int(rng.integers(syllables[0], syllables[1] + 1))
                w = "".join(self._syllable(rng) for _ in range(k))
                if w not in seen:
                    seen.add(w)
                    out.append(w)
            return out

        self.function = words(30, (1, 1))
        self.topics = [words(40) for _ in range(8)]
        self.positive = words(30)
        self.particles = words(6, (1, 1))
        self.determiners = words(4, (1, 1))
        self.targets = words(24)
        self.attack = words(10)
        self.profanity = []
        for root in words(8, (1, 1)):
            group = [root]
            for kind in range(6):
                v = self._variant(root, kind)
                if v not in seen:
                    seen.add(v)
                    group.append(v)
            self.profanity.append(group)
        self.markers = {c: words(3, (2, 3)) for c in CLASSES}
        ranks = np.arange(1, len(self.function) + 1)
        self.function_p = (1.0 / ranks) / (1.0 / ranks).sum()

    @staticmethod
    def _syllable(rng):
        nucleus = str(rng.choice(_NUCLEI))
        if rng.random() < 0.6:
            nucleus = unicodedata.normalize("NFC", nucleus[0] + rng.choice(_TONES) + nucleus[1:])
        return rng.choice(_ONSETS) + nucleus + rng.choice(_CODAS)

    @staticmethod
    def _variant(word, kind):
        plain = unicodedata.normalize("NFKD", word).encode("ascii", "ignore").decode() or word
        if kind == 0:
            return plain
        if kind == 1:
            return word + word[-1]
        if kind == 2:
            return word[0] + "." + word[1:] if len(word) > 1 else word + "."
        if kind == 3:
            return plain.replace("a", "4").replace("o", "0").replace("i", "1")
        if kind == 4:
            return plain[0] + plain[-1] if len(plain) > 2 else plain + "k"
        return plain + "h"


def _surface(word: str, rng) -> str:
    r = rng.random()
    if r < 0.05:
        return word.upper()
    if r < 0.08:
        return unicodedata.normalize("NFD", word)
    if r < 0.1:
        return word.capitalize()
    return word


def _phone(rng):
    return ("+84" if rng.random() < 0.3 else "0") + "".join(str(d) for d in rng.integers(0, 10, 9))


def _email(rng, lex):
    return f"{lex.function[int(rng.integers(0, 30))]}{int(rng.integers(1, 99))}@mail.com"


def _zipf_index(n, rng, a=1.3):
    w = 1.0 / np.arange(1, n + 1) ** a
    return int(rng.choice(n, p=w / w.sum()))


def _sample_doc(cls: str, rng, lex: Lexicon) -> list[str]:
    topic = lex.topics[int(rng.integers(0, len(lex.topics)))]
    length = int(rng.integers(5, 14))
    words = [topic[int(rng.integers(0, len(topic)))] if rng.random() < 0.5
             else lex.function[int(rng.choice(len(lex.function), p=lex.function_p))] for _ in range(length)]

    def insert(tokens):
        pos = int(rng.integers(0, len(words) + 1))
        words[pos:pos] = tokens

    def pick(pool):
        return pool[int(rng.integers(0, len(pool)))]

    def prof_phrase():
        group = lex.profanity[int(rng.integers(0, len(lex.profanity)))]
        phrase = [group[_zipf_index(len(group), rng)]]
        if rng.random() < 0.7:
            phrase.insert(0, pick(lex.particles))
        if rng.random() < 0.5:
            phrase.append(pick(lex.particles))
        return phrase

    def target_phrase():
        return [pick(lex.determiners), pick(lex.targets)]

    # Particles and determiners also occur in neutral phrases, so they are context, not cues.
    if rng.random() < 0.35:
        insert([pick(lex.particles)])
    if rng.random() < 0.35:
        insert([pick(lex.determiners), pick(topic)])
    if cls == "CLEAN":
        for _ in range(int(rng.integers(0, 3))):
            insert([pick(lex.positive)])
        if rng.random() < 0.015:
            insert(prof_phrase())
        if rng.random() < 0.05:
            insert([pick(lex.targets)])
    elif cls == "OFFENSIVE":
        for _ in range(int(rng.integers(1, 3))):
            insert(prof_phrase())
        if rng.random() < 0.12:
            insert([pick(lex.targets)])
        if rng.random() < 0.2:
            insert([pick(lex.positive)])
    else:
        style = rng.random()
        if style < 0.5:
            insert(target_phrase() + prof_phrase())
        elif style < 0.8:
            insert([pick(lex.attack)] + target_phrase())
        else:
            insert(target_phrase())
            insert(prof_phrase())
        if rng.random() < 0.3:
            insert(prof_phrase())
    if rng.random() < 0.05:
        insert([pick(lex.markers[cls])])
    if rng.random() < 0.1:
        insert(["".join(rng.choice(list("qwxzjkf"), size=int(rng.integers(3, 6))))])
    words = [_surface(w, rng) for w in words]
    if rng.random() < 0.25:
        insert(["".join(rng.choice(_EMOJI, size=int(rng.integers(1, 4))))])
    if rng.random() < 0.03:
        insert([_phone(rng)])
    if rng.random() < 0.03:
        insert([_email(rng, lex)])
    if rng.random() < 0.2:
        words.append(str(rng.choice(["!", "?", "...", ",", "!!"])))
    return words


def generate_synthetic_corpus(seed: int = 0, sizes: Optional[Mapping[str, int]] = None,
                              label_noise: float = 0.01) -> list[RawDocument]:
    """Documents for each class in the requested numbers, shuffled.

    ``label_noise`` is the fraction of documents whose text is drawn from a
    different class than their label.
    """
    sizes = dict(table_sizes(2000) if sizes is None else sizes)
    for c, n in sizes.items():
        if c not in CLASSES or n <= 0:
            raise ValueError(f"invalid class size {c}={n}")
    rng = np.random.default_rng(seed)
    lex = Lexicon()
    docs = []
    for cls in CLASSES:
        for _ in range(sizes.get(cls, 0)):
            source = cls
            if rng.random() < label_noise:
                source = str(rng.choice([c for c in CLASSES if c != cls]))
            docs.append(RawDocument(" ".join(_sample_doc(source, rng, lex)), cls))
    order = rng.permutation(len(docs))
    return [docs[i] for i in order]
