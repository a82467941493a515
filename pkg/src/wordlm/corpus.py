"""Corpus ingestion: cleanup, word segmentation, statistics, splits.

Documents are plain UTF-8 text separated by blank lines. All downstream
modules consume *cleaned* text: whitespace runs collapsed to single spaces,
punctuation detached into standalone words, control characters stripped.
Words are whatever remains between single spaces; characters are Unicode
scalar values throughout.
"""

from __future__ import annotations

import json
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorpusError

DEFAULT_RARE_MAX = 10
DEFAULT_FREQ_MIN = 45
DEFAULT_TRAIN_RATIO = 0.9


@dataclass(frozen=True)
class Document:
    """One unit of corpus text with an opaque identifier."""

    text: str
    id: str = ""


@dataclass(frozen=True)
class WordSequence:
    """Words of a cleaned text plus their (start, end) offsets into it."""

    words: tuple[str, ...]
    boundaries: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.words)


@dataclass(frozen=True)
class CorpusStats:
    """Aggregate statistics over the cleaned corpus.

    ``chars_per_word`` is mean word length in Unicode scalar values.
    ``total_chars`` and ``size_bytes`` both describe the cleaned text
    (words plus single separators), so their ratio is the corpus
    bytes-per-character used for byte-level context budgets.
    """

    size_bytes: int
    total_words: int
    unique_words: int
    chars_per_word: float
    total_chars: int
    word_freq: dict[str, int] = field(repr=False)

    def to_json(self) -> str:
        payload = {
            "size_bytes": self.size_bytes,
            "total_words": self.total_words,
            "unique_words": self.unique_words,
            "chars_per_word": self.chars_per_word,
            "total_chars": self.total_chars,
            "word_freq": self.word_freq,
        }
        return json.dumps(payload, ensure_ascii=False, sort_keys=True)


@dataclass(frozen=True)
class Split:
    """Deterministic train/validation partition of a document list."""

    train: tuple[Document, ...]
    valid: tuple[Document, ...]
    seed: int


def _is_control(ch: str) -> bool:
    return unicodedata.category(ch) in ("Cc", "Cf")


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def clean_text(raw: str) -> str:
    """Normalize raw text for word segmentation.

    Rules, applied in one pass: control characters are dropped, every
    punctuation character becomes a standalone space-separated token,
    whitespace runs collapse to a single space, and the ends are
    stripped. Idempotent: clean_text(clean_text(x)) == clean_text(x).

    Raises CorpusError if ``raw`` contains NUL (the one control character
    treated as corruption rather than noise).
    """
    if "\x00" in raw:
        raise CorpusError("text contains NUL; refusing to treat as valid UTF-8 corpus input")
    out: list[str] = []
    for ch in raw:
        if ch.isspace():
            out.append(" ")
        elif _is_control(ch):
            continue
        elif _is_punct(ch):
            out.append(f" {ch} ")
        else:
            out.append(ch)
    return " ".join("".join(out).split())


def segment_words(text: str) -> WordSequence:
    """Split cleaned text on single spaces, keeping character offsets.

    Empty input yields an empty sequence. Words are guaranteed non-empty
    and whitespace-free; joining them with single spaces reconstructs
    ``text`` exactly when ``text`` is already cleaned.
    """
    words: list[str] = []
    bounds: list[tuple[int, int]] = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos] == " ":
            pos += 1
            continue
        end = text.find(" ", pos)
        if end == -1:
            end = n
        words.append(text[pos:end])
        bounds.append((pos, end))
        pos = end + 1
    return WordSequence(tuple(words), tuple(bounds))


def compute_stats(docs: list[Document]) -> CorpusStats:
    """Exact counts over cleaned documents.

    Raises CorpusError("empty corpus") when there are no documents or no
    words survive cleanup.
    """
    if not docs:
        raise CorpusError("empty corpus")
    freq: Counter[str] = Counter()
    total_chars = 0
    size_bytes = 0
    word_chars = 0
    for doc in docs:
        cleaned = clean_text(doc.text)
        total_chars += len(cleaned)
        size_bytes += len(cleaned.encode("utf-8"))
        for word in segment_words(cleaned).words:
            freq[word] += 1
            word_chars += len(word)
    total_words = sum(freq.values())
    if total_words == 0:
        raise CorpusError("empty corpus")
    return CorpusStats(
        size_bytes=size_bytes,
        total_words=total_words,
        unique_words=len(freq),
        chars_per_word=word_chars / total_words,
        total_chars=total_chars,
        word_freq=dict(freq),
    )


def stratify_by_frequency(
    word_freq: dict[str, int],
    rare_max: int = DEFAULT_RARE_MAX,
    freq_min: int = DEFAULT_FREQ_MIN,
) -> tuple[set[str], set[str]]:
    """Split vocabulary into rare (< rare_max) and frequent (> freq_min) words.

    Both comparisons are strict, so counts equal to a threshold fall in
    neither stratum. Raises ConfigError when rare_max >= freq_min.
    """
    if rare_max >= freq_min:
        raise ConfigError(f"rare_max ({rare_max}) must be < freq_min ({freq_min})")
    rare = {w for w, c in word_freq.items() if c < rare_max}
    frequent = {w for w, c in word_freq.items() if c > freq_min}
    return rare, frequent


def split_documents(
    docs: list[Document], seed: int, train_ratio: float = DEFAULT_TRAIN_RATIO
) -> Split:
    """Seeded 90/10 (by default) train/validation split by document.

    Pure function of (docs, seed, train_ratio): the same inputs always
    produce the same partition.
    """
    if not docs:
        raise CorpusError("empty corpus")
    if not 0.0 < train_ratio < 1.0:
        raise ConfigError(f"train_ratio must be in (0, 1), got {train_ratio}")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(docs))
    n_train = max(1, int(round(len(docs) * train_ratio)))
    if n_train == len(docs) and len(docs) > 1:
        n_train -= 1
    train = tuple(docs[i] for i in order[:n_train])
    valid = tuple(docs[i] for i in order[n_train:])
    return Split(train=train, valid=valid, seed=seed)


def load_documents(path: str | Path) -> list[Document]:
    """Read a plain UTF-8 text file; blank lines separate documents."""
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"corpus file not found: {path}") from None
    except UnicodeDecodeError as exc:
        raise CorpusError(f"corpus file {path} is not valid UTF-8: {exc}") from None
    docs = []
    for i, chunk in enumerate(re.split(r"\n[ \t]*\n+", raw)):
        chunk = chunk.strip()
        if chunk:
            docs.append(Document(text=chunk, id=f"{path.name}#{i}"))
    return docs


def cleaned_text(docs: list[Document]) -> list[str]:
    """Cleaned text of each document, dropping any that clean to empty."""
    out = []
    for doc in docs:
        text = clean_text(doc.text)
        if text:
            out.append(text)
    return out
