"""Text normalization for noisy social-media comments.

The order is fixed: ``normalize_text`` -> ``mask_pii`` -> ``split_tokens``.
"""
from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import regex

from . import CLASSES

EMOJI = "EMOJI"
EMAIL = "EMAIL"
PHONE = "PHONE"
PLACEHOLDERS = (EMOJI, EMAIL, PHONE)

# Digits, '#' and '*' carry the Emoji property too; they are deliberately not matched here.
_EMOJI_UNIT = r"[\p{Extended_Pictographic}\p{Emoji_Presentation}\p{Regional_Indicator}][\p{Emoji_Modifier}\uFE0F\u20E3]*"
_EMOJI_RUN = regex.compile(rf"(?:{_EMOJI_UNIT}(?:\u200D{_EMOJI_UNIT})*)+")
_PLACEHOLDER_RE = regex.compile(r"\b(?:EMOJI|EMAIL|PHONE)\b")
_EMAIL_RE = regex.compile(r"[\w.+-]+@[\w-]+(?:\.[\w-]+)*\.[^\W\d_]{2,}(?![\w@])")
_PHONE_RE = regex.compile(r"(?<![\w+])\+?\d{9,11}(?!\d)")


class DataError(ValueError):
    """Malformed input record."""


@dataclass
class RawDocument:
    text: str
    label: Optional[str] = None

    def __post_init__(self):
        if self.label is not None and self.label not in CLASSES:
            raise DataError(f"unknown label {self.label!r}")


@dataclass
class CleanDocument:
    tokens: list[str] = field(default_factory=list)
    label: Optional[str] = None


def _lower_keep_placeholders(text: str) -> str:
    out, pos = [], 0
    for m in _PLACEHOLDER_RE.finditer(text):
        out.append(text[pos:m.start()].lower())
        out.append(m.group())
        pos = m.end()
    out.append(text[pos:].lower())
    return "".join(out)


def _spaced(repl: str):
    """Substitution that keeps the placeholder a separate whitespace-delimited word."""
    def sub(m):
        s = m.string
        left = " " if m.start() > 0 and not s[m.start() - 1].isspace() else ""
        right = " " if m.end() < len(s) and not s[m.end()].isspace() else ""
        return left + repl + right
    return sub


def normalize_text(text: str) -> str:
    """NFC-normalize, lowercase and replace each run of emoji with ``EMOJI``.

    Placeholder words already present are left uppercase so the function is
    idempotent.
    """
    text = unicodedata.normalize("NFC", text)
    text = _EMOJI_RUN.sub(_spaced(EMOJI), text)
    text = _lower_keep_placeholders(text)
    return unicodedata.normalize("NFC", text)


def mask_pii(text: str) -> str:
    text = _EMAIL_RE.sub(_spaced(EMAIL), text)
    return _PHONE_RE.sub(_spaced(PHONE), text)


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def split_tokens(text: str) -> list[str]:
    tokens = []
    for chunk in text.split():
        buf = []
        for ch in chunk:
            if _is_punct(ch):
                if buf:
                    tokens.append("".join(buf))
                    buf = []
                tokens.append(ch)
            else:
                buf.append(ch)
        if buf:
            tokens.append("".join(buf))
    return tokens


def clean(doc: RawDocument) -> CleanDocument:
    return CleanDocument(split_tokens(mask_pii(normalize_text(doc.text))), doc.label)


def clean_text(text: str) -> list[str]:
    return split_tokens(mask_pii(normalize_text(text)))


# ---------------------------------------------------------------- TSV I/O


def parse_line(line: str, lineno: int = 0) -> Optional[RawDocument]:
    """Parse one ``label<TAB>text`` record. Returns None for comments/blank lines."""
    line = line.rstrip("\r\n")
    if not line.strip() or line.startswith("#"):
        return None
    if "\t" not in line:
        raise DataError(f"line {lineno}: missing TAB separator")
    label, text = line.split("\t", 1)
    label = label.strip()
    if label == "-":
        return RawDocument(text, None)
    if label not in CLASSES:
        raise DataError(f"line {lineno}: unknown label {label!r}")
    return RawDocument(text, label)


def iter_tsv(path, errors: Optional[list] = None) -> Iterator[RawDocument]:
    """Yield records from a TSV corpus.

    Malformed lines raise ``DataError`` unless an ``errors`` list is given,
    in which case the exception is appended and the line skipped.
    """
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                doc = parse_line(line, lineno)
            except DataError as exc:
                if errors is None:
                    raise
                errors.append(exc)
                continue
            if doc is not None:
                yield doc


def load_clean(path) -> list[CleanDocument]:
    return [clean(d) for d in iter_tsv(path)]


def format_line(label: Optional[str], tokens: Sequence[str]) -> str:
    return f"{label or '-'}\t{' '.join(tokens)}\n"
