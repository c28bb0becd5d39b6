"""Byte-pair-merge subword vocabulary with RoBERTa-style special tokens."""
from __future__ import annotations

import json
import os
import tempfile
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .preprocess import EMAIL, EMOJI, PHONE, CleanDocument

BOS, EOS, PAD, UNK, MASK = "<s>", "</s>", "<pad>", "<unk>", "<mask>"
SPECIALS = (BOS, PAD, EOS, UNK, MASK, EMOJI, EMAIL, PHONE)
# Specials that never hold corpus content; they are excluded from masking and fills.
STRUCTURAL = (BOS, PAD, EOS, MASK)
EOW = "</w>"


class EmptyCorpus(ValueError):
    pass


class IdOutOfRange(IndexError):
    pass


def word_symbols(word: str) -> tuple[str, ...]:
    """Initial symbols of a word: its characters, the last one tagged with ``</w>``."""
    chars = list(word)
    chars[-1] = chars[-1] + EOW
    return tuple(chars)


def _merge_word(symbols: tuple, pair: tuple, joined: str) -> tuple:
    out, i = [], 0
    n = len(symbols)
    while i < n:
        if i < n - 1 and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(joined)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


@dataclass
class Vocabulary:
    tokens: list[str]
    merges: list[tuple[str, str]]
    specials: tuple[str, ...] = SPECIALS
    token_to_id: dict[str, int] = field(init=False, repr=False)
    _ranks: dict = field(init=False, repr=False)
    _cache: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if tuple(self.tokens[: len(self.specials)]) != tuple(self.specials):
            raise ValueError("special tokens must occupy the lowest ids")
        self.merges = [tuple(m) for m in self.merges]
        self._ranks = {m: r for r, m in enumerate(self.merges)}
        self._cache = {}

    def __len__(self):
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.token_to_id[token]

    @property
    def bos_id(self):
        return self.token_to_id[BOS]

    @property
    def eos_id(self):
        return self.token_to_id[EOS]

    @property
    def pad_id(self):
        return self.token_to_id[PAD]

    @property
    def unk_id(self):
        return self.token_to_id[UNK]

    @property
    def mask_id(self):
        return self.token_to_id[MASK]

    @property
    def structural_ids(self) -> frozenset:
        return frozenset(self.token_to_id[t] for t in STRUCTURAL)

    def content_ids(self) -> list[int]:
        """Ids a masked slot may be filled with (everything but structural tokens and ``<unk>``)."""
        skip = self.structural_ids | {self.unk_id}
        return [i for i in range(len(self.tokens)) if i not in skip]

    # ------------------------------------------------------------ encoding

    def bpe(self, word: str) -> tuple[str, ...]:
        if word in self._cache:
            return self._cache[word]
        symbols = word_symbols(word)
        while len(symbols) > 1:
            pairs = {(a, b) for a, b in zip(symbols, symbols[1:])}
            best = min(pairs, key=lambda p: self._ranks.get(p, float("inf")))
            if best not in self._ranks:
                break
            symbols = _merge_word(symbols, best, best[0] + best[1])
        self._cache[word] = symbols
        return symbols

    def word_ids(self, word: str) -> list[int]:
        if word in self.specials:
            return [self.token_to_id[word]]
        unk = self.unk_id
        return [self.token_to_id.get(s, unk) for s in self.bpe(word)]

    def encode(self, doc, max_len: int) -> list[int]:
        """``<s>`` + subword ids + ``</s>``, truncated to ``max_len`` keeping ``</s>`` last."""
        if max_len < 2:
            raise ValueError("max_len must be >= 2")
        tokens = doc.tokens if isinstance(doc, CleanDocument) else doc
        body = []
        for w in tokens:
            body.extend(self.word_ids(w))
            if len(body) >= max_len - 2:
                break
        return [self.bos_id] + body[: max_len - 2] + [self.eos_id]

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Surface tokens for ``ids``; ``<s>``/``</s>``/``<pad>`` are dropped, ``<mask>`` stays visible."""
        drop = {self.bos_id, self.eos_id, self.pad_id}
        words, pending = [], []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise IdOutOfRange(f"token id {i} outside 0..{len(self.tokens) - 1}")
            if i in drop:
                continue
            tok = self.tokens[i]
            if i < len(self.specials):
                if pending:
                    words.append("".join(pending))
                    pending = []
                words.append(tok)
            elif tok.endswith(EOW):
                pending.append(tok[: -len(EOW)])
                words.append("".join(pending))
                pending = []
            else:
                pending.append(tok)
        if pending:
            words.append("".join(pending))
        return words

    # ------------------------------------------------------------ persistence

    def to_json(self) -> str:
        payload = {"specials": list(self.specials), "merges": [list(m) for m in self.merges], "tokens": self.tokens}
        return json.dumps(payload, ensure_ascii=False, indent=1)

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls(tokens=list(payload["tokens"]), merges=[tuple(m) for m in payload["merges"]],
                   specials=tuple(payload["specials"]))


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_vocab(corpus: Sequence, target_size: int) -> Vocabulary:
    """Learn BPE merges until the vocabulary holds ``target_size`` entries.

    Pair-frequency ties break on the lexicographically smallest pair, so the
    result depends only on the corpus contents and ``target_size``.
    """
    word_counts: Counter = Counter()
    for doc in corpus:
        tokens = doc.tokens if isinstance(doc, CleanDocument) else doc
        for w in tokens:
            if w and w not in SPECIALS:
                word_counts[w] += 1
    if not word_counts:
        raise EmptyCorpus("corpus contains no tokens")

    words = [list(word_symbols(w)) for w in word_counts]
    freqs = list(word_counts.values())
    alphabet = sorted({s for w in words for s in w})
    tokens = list(SPECIALS) + alphabet
    if target_size < len(tokens):
        raise ValueError(f"target_size {target_size} < specials + alphabet = {len(tokens)}")
    known = set(tokens)

    pair_counts: Counter = Counter()
    where = defaultdict(set)
    for wi, (sym, f) in enumerate(zip(words, freqs)):
        for p in zip(sym, sym[1:]):
            pair_counts[p] += f
            where[p].add(wi)

    merges = []
    while len(tokens) < target_size:
        live = [(c, p) for p, c in pair_counts.items() if c > 0]
        if not live:
            break
        top = max(c for c, _ in live)
        pair = min(p for c, p in live if c == top)
        joined = pair[0] + pair[1]
        merges.append(pair)
        if joined not in known:
            known.add(joined)
            tokens.append(joined)
        for wi in sorted(where.pop(pair, ())):
            sym, f = words[wi], freqs[wi]
            for p in zip(sym, sym[1:]):
                pair_counts[p] -= f
            new = list(_merge_word(tuple(sym), pair, joined))
            words[wi] = new
            for p in zip(new, new[1:]):
                pair_counts[p] += f
                where[p].add(wi)
        pair_counts.pop(pair, None)
    return Vocabulary(tokens=tokens, merges=merges)
