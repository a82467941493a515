"""Greedy generation for flat and hierarchical models, with step auditing.

Hierarchical generation loops per word: predict the next word's CLS
group from all words so far, decode base tokens until EOW, append, and
re-window. Word encodings are cached (words are independent under the
intra-word mask, so a word's CLS embeddings never change once computed).

Pipelined mode moves the word-level predictor and the word decoder onto
separate threads connected by queues. The data dependency (a word must
be decoded and encoded before the next prediction) is preserved, so
pipelined output is identical to sequential output by construction; the
idealized steady-state overlap that motivates the pipeline is quantified
analytically by step_count_audit instead.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .corpus import clean_text, segment_words
from .errors import ConfigError
from .model import SegmentedBatch
from .nn import Tensor, no_grad
from .tokenizers import BOS_ID, CLS_ID, EOW_ID, N_SPECIALS, PAD_ID


@dataclass
class GenAudit:
    """Forward-pass counters collected during one generation call."""

    mode: str = ""
    scheme: str = ""
    base_layers: int = 0
    encoder_layers: int = 0
    worddec_layers: int = 0
    core_passes: int = 0
    encoder_passes: int = 0
    worddec_token_steps: int = 0
    eow_passes: int = 0
    chars_generated: int = 0
    words_generated: int = 0
    per_word: list = field(default_factory=list)


def _trim_incomplete_utf8(data: bytes) -> bytes:
    """Drop a trailing incomplete multi-byte sequence (final-boundary repair)."""
    for k in range(1, min(3, len(data)) + 1):
        b = data[-k]
        if b & 0b1100_0000 == 0b1100_0000:
            need = 2 if b & 0b0010_0000 == 0 else 3 if b & 0b0001_0000 == 0 else 4
            if need > k:
                return data[:-k]
            break
        if b & 0b1000_0000 == 0:
            break
    return data


def generate_flat(model, tokenizer, prompt: str, max_new: int, audit: GenAudit | None = None) -> str:
    """Greedy continuation of max_new units; returns the new text only."""
    if max_new < 0:
        raise ConfigError("max_new must be >= 0")
    cfg = model.config
    if audit is not None:
        audit.mode = "flat"
        audit.scheme = cfg.scheme
        audit.base_layers = cfg.base_layers
    text = clean_text(prompt)
    ids = list(tokenizer.encode(text).ids)
    if len(ids) > cfg.block_tokens:
        ids = ids[-cfg.block_tokens :]
    new_ids: list[int] = []
    with no_grad():
        for _ in range(max_new):
            window = ids[-cfg.block_tokens :]
            logits = model.forward_ids(np.array([BOS_ID] + window, dtype=np.int64))
            nxt = int(logits.data[-1].argmax())
            ids.append(nxt)
            new_ids.append(nxt)
            if audit is not None:
                audit.core_passes += 1
    if cfg.scheme == "byte":
        data = bytes(i - N_SPECIALS for i in new_ids if i >= N_SPECIALS)
        out = _trim_incomplete_utf8(data).decode("utf-8", errors="replace")
    else:
        out = tokenizer.decode(new_ids)
    if audit is not None:
        audit.chars_generated = len(out)
    return out


# -- hierarchical -----------------------------------------------------------


def _encode_one_word(model, tokens: list[int]) -> np.ndarray:
    """CLS embeddings [n_cls, dim] for one (possibly empty) word."""
    cfg = model.config
    row = np.full((1, 1, cfg.word_width), PAD_ID, dtype=np.int64)
    row[0, 0, : cfg.n_cls] = CLS_ID
    body = tokens[: cfg.max_word_len]
    row[0, 0, cfg.n_cls : cfg.n_cls + len(body)] = body
    row[0, 0, cfg.n_cls + len(body)] = EOW_ID
    batch = SegmentedBatch(
        words=row, word_count=np.asarray([1]), flat_targets=np.full_like(row, PAD_ID)
    )
    return model.encode_words(batch).data[0, 0]


def _decode_one_word(model, cls_next: Tensor, audit: GenAudit | None) -> list[int]:
    """Greedy base tokens until EOW/PAD or the length cap."""
    cfg = model.config
    emitted: list[int] = []
    passes = 0
    terminated = False
    while len(emitted) < cfg.max_word_len:
        logits = model.decode_word(cls_next, emitted)
        passes += 1
        nxt = int(logits.data.argmax())
        if nxt in (EOW_ID, PAD_ID):
            terminated = True
            break
        emitted.append(nxt)
    if audit is not None:
        audit.worddec_token_steps += len(emitted)
        audit.eow_passes += 1 if terminated else 0
        audit.per_word.append((len(emitted), passes))
    return emitted


class _WordWindow:
    """Sliding context of words with cached CLS encodings."""

    def __init__(self, model, audit: GenAudit | None):
        self.model = model
        self.audit = audit
        self.tokens: list[list[int]] = []
        self.reps: list[np.ndarray] = []
        self.budget = model.config.block_chars

    def push(self, word_tokens: list[int]) -> None:
        self.tokens.append(word_tokens)
        self.reps.append(_encode_one_word(self.model, word_tokens))
        if self.audit is not None:
            self.audit.encoder_passes += 1
        while (self._span() > self.budget or len(self.tokens) > self.budget) and len(
            self.tokens
        ) > 1:
            self.tokens.pop(0)
            self.reps.pop(0)

    def _span(self) -> int:
        toks = sum(len(t) for t in self.tokens)
        return toks + max(0, len(self.tokens) - 1)

    def predict_cls(self) -> Tensor:
        if self.reps:
            reps = Tensor(np.stack(self.reps)[None])
        else:
            cfg = self.model.config
            reps = Tensor(np.zeros((1, 0, cfg.n_cls, cfg.dim), dtype=np.float32))
        if self.audit is not None:
            self.audit.core_passes += 1
        return self.model.predict_next_cls(reps)[0]


def _prompt_words(model, tokenizer, prompt: str) -> list[list[int]]:
    text = clean_text(prompt)
    words = segment_words(text).words
    if not words:
        raise ConfigError("prompt has no words after cleanup")
    out = []
    mwl = model.config.max_word_len
    for w in words:
        toks = tokenizer.encode_word(w)
        for i in range(0, max(len(toks), 1), mwl):
            out.append(toks[i : i + mwl])
    return out


def _word_text(tokenizer, scheme: str, tokens: list[int]) -> str:
    if scheme == "byte":
        data = bytes(i - N_SPECIALS for i in tokens if i >= N_SPECIALS)
        return data.decode("utf-8", errors="replace")
    return tokenizer.decode(tokens)


def generate_hierarchical(
    model,
    tokenizer,
    prompt: str,
    max_new_words: int,
    pipelined: bool = False,
    audit: GenAudit | None = None,
) -> str:
    """Greedy word-by-word continuation; returns the new text only."""
    if max_new_words < 0:
        raise ConfigError("max_new_words must be >= 0")
    cfg = model.config
    if audit is not None:
        audit.mode = "pipelined" if pipelined else "sequential"
        audit.scheme = cfg.scheme
        audit.base_layers = cfg.base_layers
        audit.encoder_layers = cfg.encoder_layers
        audit.worddec_layers = cfg.worddec_layers
    with no_grad():
        window = _WordWindow(model, audit)
        window.audit = None  # prompt encoding is not audited
        for toks in _prompt_words(model, tokenizer, prompt):
            window.push(toks)
        window.audit = audit
        if pipelined:
            emitted_words = _run_pipelined(window, max_new_words, audit)
        else:
            emitted_words = []
            for _ in range(max_new_words):
                cls_next = window.predict_cls()
                emitted = _decode_one_word(model, cls_next, audit)
                emitted_words.append(emitted)
                window.push(emitted)
        words = [_word_text(tokenizer, cfg.scheme, toks) for toks in emitted_words]
    out = " ".join(words)
    if audit is not None:
        audit.words_generated = len(words)
        audit.chars_generated = len(out)
    return out


def _run_pipelined(window: _WordWindow, max_new_words: int, audit) -> list[list[int]]:
    """Producer (predict CLS') and consumer (decode word) on separate threads."""
    model = window.model
    cls_q: queue.Queue = queue.Queue(maxsize=2)
    tok_q: queue.Queue = queue.Queue(maxsize=2)
    errors: list[BaseException] = []
    decoded: list[list[int]] = []

    def producer():
        try:
            with no_grad():
                for _ in range(max_new_words):
                    cls_q.put(window.predict_cls())
                    toks = tok_q.get()
                    if toks is None:
                        return
                    window.push(toks)
        except BaseException as e:  # noqa: BLE001 - repropagated below
            errors.append(e)
            cls_q.put(None)

    def consumer():
        try:
            with no_grad():
                for _ in range(max_new_words):
                    cls_next = cls_q.get()
                    if cls_next is None:
                        return
                    emitted = _decode_one_word(model, cls_next, audit)
                    decoded.append(emitted)
                    tok_q.put(emitted)
        except BaseException as e:  # noqa: BLE001 - repropagated below
            errors.append(e)
            tok_q.put(None)

    threads = [threading.Thread(target=producer), threading.Thread(target=consumer)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return decoded


def step_count_audit(audit: GenAudit) -> dict:
    """Summarize forward-pass counts and idealized wall-step depths.

    Wall steps count sequentially dependent transformer layers. Flat:
    every unit costs base_layers. Hierarchical sequential: everything is
    serial. Hierarchical pipelined (idealized steady state): per word,
    the word-level path (encode previous word + predict) overlaps the
    word decoder's token loop, so each word costs the max of the two.
    """
    out = {
        "mode": audit.mode,
        "scheme": audit.scheme,
        "core_passes": audit.core_passes,
        "chars_generated": audit.chars_generated,
    }
    if audit.mode == "flat":
        out["wall_steps"] = {"flat": audit.core_passes * audit.base_layers}
        return out
    word_path = audit.encoder_layers + audit.base_layers
    seq_wall = (
        audit.encoder_passes * audit.encoder_layers
        + audit.core_passes * audit.base_layers
        + (audit.worddec_token_steps + audit.eow_passes) * audit.worddec_layers
    )
    pipe_wall = word_path
    for _, passes in audit.per_word:
        pipe_wall += max(word_path, passes * audit.worddec_layers)
    out.update(
        {
            "encoder_passes": audit.encoder_passes,
            "worddec_token_steps": audit.worddec_token_steps,
            "eow_passes": audit.eow_passes,
            "words_generated": audit.words_generated,
            "wall_steps": {
                "sequential": seq_wall,
                "pipelined": pipe_wall,
                "flat_equivalent": audit.chars_generated * audit.base_layers,
            },
        }
    )
    return out
