"""Held-out metrics: word accuracy, char accuracy, rarity strata, numeracy.

Word prediction conditions on gold context up to the preceding word
boundary under information parity (every scheme sees the same number of
characters), then greedily decodes units until the scheme's boundary
signal: EOW for hierarchical models, a space for flat char/byte/subword
models, the single predicted token for word models. A word counts only
on exact string match.

Character accuracy is teacher-forced argmax agreement; a correct
multi-character token credits all of its characters. Byte models are
scored per byte; hierarchical models score char and EOW positions (EOW
plays the role the space token has in flat models).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass

import numpy as np

from .corpus import segment_words
from .errors import ConfigError
from .nn import Tensor, no_grad
from .tokenizers import BOS_ID, EOW_ID, N_SPECIALS, PAD_ID

_NUMBER_RE = re.compile(r"[+-]?\d[\d,]*(?:\.\d*)?")


def parse_number(word: str) -> float | None:
    """Decimal parse: optional sign, digits, thousands separators, point."""
    if not _NUMBER_RE.fullmatch(word):
        return None
    try:
        return float(word.replace(",", ""))
    except ValueError:
        return None


@dataclass(frozen=True)
class WordRecord:
    word: str
    correct: bool


@dataclass(frozen=True)
class EvalReport:
    word_acc: float
    char_acc: float
    rare_acc: float | None
    freq_acc: float | None
    num_pct: float | None
    eacc: float | None
    mdape: float | None
    counts: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "word_acc": self.word_acc,
                "char_acc": self.char_acc,
                "rare_acc": self.rare_acc,
                "freq_acc": self.freq_acc,
                "num_pct": self.num_pct,
                "eacc": self.eacc,
                "mdape": self.mdape,
                "counts": self.counts,
            },
            indent=2,
            sort_keys=True,
        )

    def to_table(self) -> str:
        def fmt(v):
            return "absent" if v is None else f"{v:.2f}"

        rows = [
            ("word accuracy %", fmt(self.word_acc)),
            ("char accuracy %", fmt(self.char_acc)),
            ("rare-word accuracy %", fmt(self.rare_acc)),
            ("frequent-word accuracy %", fmt(self.freq_acc)),
            ("number emission %", fmt(self.num_pct)),
            ("exponent accuracy %", fmt(self.eacc)),
            ("MdAPE %", fmt(self.mdape)),
        ]
        width = max(len(r[0]) for r in rows)
        lines = [f"{name:<{width}}  {val:>8}" for name, val in rows]
        lines.append(f"{'words evaluated':<{width}}  {self.counts['word_positions']:>8}")
        return "\n".join(lines)


# -- greedy word decoding helpers ---------------------------------------------


def _decode_flat_word(model, tokenizer, ctx_ids: list[int], cap: int) -> str | None:
    """Greedy units from gold context until a boundary; None if none reached."""
    scheme = model.config.scheme
    window = model.config.block_tokens
    ids = list(ctx_ids)
    emitted: list[int] = []
    if scheme == "word":
        inp = np.array([BOS_ID] + ids[-window:], dtype=np.int64)
        nxt = int(model.forward_ids(inp).data[-1].argmax())
        if nxt < N_SPECIALS:
            return None
        return tokenizer.vocab.token_of[nxt]
    boundary = 32 + N_SPECIALS if scheme == "byte" else tokenizer.vocab.lookup(" ")
    for _ in range(cap):
        inp = np.array([BOS_ID] + ids[-window:], dtype=np.int64)
        nxt = int(model.forward_ids(inp).data[-1].argmax())
        if nxt == boundary and emitted:
            break
        if nxt < N_SPECIALS or nxt == boundary:
            return None
        emitted.append(nxt)
        ids.append(nxt)
    else:
        return None
    if scheme == "byte":
        return tokenizer.decode_strict(emitted)
    return tokenizer.decode(emitted)


def _decode_hier_word(model, tokenizer, ctx_words: list[list[int]]) -> str | None:
    """Predict the next word from gold context words; None on no termination."""
    from .model import build_segmented_batch

    cfg = model.config
    if ctx_words:
        batch = build_segmented_batch([ctx_words], cfg)
        reps = model.encode_words(batch)
    else:
        reps = Tensor(np.zeros((1, 0, cfg.n_cls, cfg.dim), dtype=np.float32))
    cls_next = model.predict_next_cls(reps)[0]
    emitted: list[int] = []
    while len(emitted) < cfg.max_word_len:
        logits = model.decode_word(cls_next, emitted)
        nxt = int(logits.data.argmax())
        if nxt in (EOW_ID, PAD_ID):
            break
        if nxt < N_SPECIALS:
            return None
        emitted.append(nxt)
    if cfg.scheme == "byte":
        return tokenizer.decode_strict(emitted)
    return tokenizer.decode(emitted)


def _context_window_words(words: list[str], end: int, budget: int) -> list[str]:
    """Longest gold-word suffix before index end whose span fits the budget."""
    span = 0
    start = end
    while start > 0:
        cost = len(words[start - 1]) + (1 if start < end else 0)
        if span + cost > budget:
            break
        span += cost
        start -= 1
    return words[start:end]


def _select_positions(n: int, limit: int | None) -> list[int]:
    if limit is None or limit >= n:
        return list(range(n))
    idx = np.linspace(0, n - 1, limit).round().astype(int)
    return sorted(set(idx.tolist()))


def word_prediction_accuracy(
    model,
    tokenizer,
    texts: list[str],
    budget: int = 192,
    max_positions: int | None = None,
    decode_cap: int = 64,
) -> tuple[float, list[WordRecord]]:
    """Percent of exactly predicted next words plus per-word records."""
    positions: list[tuple[list[str], int]] = []
    for text in texts:
        words = segment_words(text).words
        for i in range(1, len(words)):
            positions.append((words, i))
    if not positions:
        raise ConfigError("no word positions to evaluate")
    records: list[WordRecord] = []
    with no_grad():
        for k in _select_positions(len(positions), max_positions):
            words, i = positions[k]
            gold = words[i]
            ctx_words = _context_window_words(words, i, budget)
            if model.config.hierarchical:
                ctx = [tokenizer.encode_word(w) for w in ctx_words]
                decoded = _decode_hier_word(model, tokenizer, ctx)
            else:
                ctx_text = " ".join(ctx_words) + " "
                ctx_ids = list(tokenizer.encode(ctx_text).ids)
                decoded = _decode_flat_word(model, tokenizer, ctx_ids, decode_cap)
            records.append(WordRecord(word=gold, correct=decoded == gold))
    acc = 100.0 * sum(r.correct for r in records) / len(records)
    return acc, records


def char_accuracy(
    model,
    tokenizer,
    texts: list[str],
    budget: int = 192,
    max_blocks: int | None = None,
) -> float:
    """Teacher-forced argmax accuracy with per-character credits."""
    from .training import hier_batches, flat_blocks

    cfg = model.config
    hit = 0.0
    total = 0.0
    with no_grad():
        if cfg.hierarchical:
            batches = hier_batches(texts, tokenizer, cfg, batch_size=4)
            if max_blocks is not None:
                batches = batches[:max_blocks]
            if not batches:
                raise ConfigError("validation split shorter than one block")
            for batch in batches:
                logits = model.forward(batch)
                pred = logits.data.argmax(axis=-1)
                keep = batch.flat_targets != PAD_ID
                ok = keep & (pred == batch.flat_targets)
                hit += float(ok.sum())
                total += float(keep.sum())
        else:
            blocks = flat_blocks(texts, tokenizer, cfg.block_tokens)
            if max_blocks is not None:
                blocks = blocks[:max_blocks]
            if not blocks:
                raise ConfigError("validation split shorter than one block")
            credits = np.ones(cfg.vocab_size)
            for tok in range(N_SPECIALS, cfg.vocab_size):
                credits[tok] = max(1, len(tokenizer.vocab.token_of[tok]))
            for block in blocks:
                inp = np.concatenate([[BOS_ID], block])
                tgt = np.concatenate([block, [PAD_ID]])
                pred = model.forward_ids(inp).data.argmax(axis=-1)
                keep = tgt != PAD_ID
                w = credits[tgt[keep]]
                hit += float((w * (pred[keep] == tgt[keep])).sum())
                total += float(w.sum())
    if total == 0:
        raise ConfigError("no teacher-forced positions to evaluate")
    return 100.0 * hit / total


def stratified_accuracy(
    records: list[WordRecord], rare: set, frequent: set
) -> tuple[float | None, float | None]:
    """Accuracy over gold words in each stratum; absent strata give None."""
    def acc(members: list[WordRecord]):
        if not members:
            return None
        return 100.0 * sum(r.correct for r in members) / len(members)

    return (
        acc([r for r in records if r.word in rare]),
        acc([r for r in records if r.word in frequent]),
    )


def build_numeracy_split(
    texts: list[str], budget: int = 192, limit: int | None = None
) -> list[tuple[list[str], int, float]]:
    """Positions whose gold word parses as a number, with full char context.

    Returns (words, index, gold_value) triples; only positions preceded
    by at least ``budget`` characters qualify.
    """
    examples = []
    for text in texts:
        seg = segment_words(text)
        for i, w in enumerate(seg.words):
            value = parse_number(w)
            if value is None:
                continue
            if seg.boundaries[i][0] < budget:
                continue
            examples.append((seg.words, i, value))
    if limit is not None:
        keep = _select_positions(len(examples), limit)
        examples = [examples[k] for k in keep]
    return examples


def number_estimation(
    model,
    tokenizer,
    examples: list[tuple[list[str], int, float]],
    budget: int = 192,
    decode_cap: int = 64,
) -> tuple[float | None, float | None, float | None, dict]:
    """%Num, exponent accuracy, and MdAPE at annotated number positions."""
    if not examples:
        return None, None, None, {"number_examples": 0, "parsed": 0}
    parsed: list[tuple[float, float]] = []
    n_parsed = 0
    with no_grad():
        for words, i, gold in examples:
            ctx_words = _context_window_words(words, i, budget)
            if model.config.hierarchical:
                ctx = [tokenizer.encode_word(w) for w in ctx_words]
                decoded = _decode_hier_word(model, tokenizer, ctx)
            else:
                ctx_text = " ".join(ctx_words) + " "
                ctx_ids = list(tokenizer.encode(ctx_text).ids)
                decoded = _decode_flat_word(model, tokenizer, ctx_ids, decode_cap)
            value = parse_number(decoded) if decoded else None
            if value is None:
                continue
            n_parsed += 1
            if gold != 0:
                parsed.append((value, gold))
    num_pct = 100.0 * n_parsed / len(examples)
    counts = {"number_examples": len(examples), "parsed": n_parsed}
    if not parsed:
        return num_pct, None, None, counts
    hits = sum(
        1
        for pred, gold in parsed
        if pred != 0
        and math.floor(math.log10(abs(pred))) == math.floor(math.log10(abs(gold)))
    )
    eacc = 100.0 * hits / len(parsed)
    apes = [100.0 * abs(pred - gold) / abs(gold) for pred, gold in parsed]
    mdape = float(np.median(apes))
    return num_pct, eacc, mdape, counts


def evaluate_model(
    model,
    tokenizer,
    texts: list[str],
    word_freq: dict[str, int] | None = None,
    budget: int = 192,
    max_positions: int | None = 500,
    max_blocks: int | None = None,
    max_number_examples: int | None = 200,
    rare_max: int = 10,
    freq_min: int = 45,
) -> EvalReport:
    """Full report over a held-out split."""
    from .corpus import stratify_by_frequency

    word_acc, records = word_prediction_accuracy(
        model, tokenizer, texts, budget=budget, max_positions=max_positions
    )
    char_acc_v = char_accuracy(model, tokenizer, texts, budget=budget, max_blocks=max_blocks)
    rare_acc = freq_acc = None
    rare_n = freq_n = 0
    if word_freq:
        rare, frequent = stratify_by_frequency(word_freq, rare_max, freq_min)
        rare_acc, freq_acc = stratified_accuracy(records, rare, frequent)
        rare_n = sum(1 for r in records if r.word in rare)
        freq_n = sum(1 for r in records if r.word in frequent)
    num_split = build_numeracy_split(texts, budget=budget, limit=max_number_examples)
    num_pct, eacc, mdape, num_counts = number_estimation(
        model, tokenizer, num_split, budget=budget
    )
    counts = {
        "word_positions": len(records),
        "rare_words": rare_n,
        "frequent_words": freq_n,
        **num_counts,
    }
    return EvalReport(
        word_acc=word_acc,
        char_acc=char_acc_v,
        rare_acc=rare_acc,
        freq_acc=freq_acc,
        num_pct=num_pct,
        eacc=eacc,
        mdape=mdape,
        counts=counts,
    )
