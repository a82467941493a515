"""Shared fixtures: synthetic corpora, tokenizers, and tiny model configs."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from textgen import synth_corpus

from wordlm.corpus import Document, cleaned_text, split_documents
from wordlm.model import ModelConfig, build_model
from wordlm.nn import Tensor
from wordlm.tokenizers import EOW_ID, ByteTokenizer, CharTokenizer


def docs_from(text: str) -> list[Document]:
    return [Document(text=t) for t in text.split("\n\n") if t.strip()]


class ScriptedHier:
    """Hierarchical-model stand-in that decodes a fixed list of words."""

    def __init__(self, config: ModelConfig, plan: list[list[int]]):
        self.config = config
        self.plan = [list(w) for w in plan]
        self.word_i = 0

    def encode_words(self, batch):
        b, w, _ = batch.words.shape
        return Tensor(np.zeros((b, w, self.config.n_cls, self.config.dim), dtype=np.float32))

    def predict_next_cls(self, reps):
        b = reps.shape[0]
        return Tensor(np.zeros((b, self.config.n_cls, self.config.dim), dtype=np.float32))

    def decode_word(self, cls_pred, prefix_tokens):
        word = self.plan[self.word_i]
        k = len(list(prefix_tokens))
        target = word[k] if k < len(word) else EOW_ID
        if target == EOW_ID:
            self.word_i += 1
        logits = np.zeros(self.config.vocab_size, dtype=np.float32)
        logits[target] = 1.0
        return Tensor(logits)


@pytest.fixture(scope="session")
def small_corpus_text() -> str:
    return synth_corpus(seed=0, target_bytes=30_000)


@pytest.fixture(scope="session")
def small_docs(small_corpus_text):
    return docs_from(small_corpus_text)


@pytest.fixture(scope="session")
def small_split(small_docs):
    return split_documents(small_docs, seed=0)


@pytest.fixture(scope="session")
def train_texts(small_split):
    return cleaned_text(list(small_split.train))


@pytest.fixture(scope="session")
def valid_texts(small_split):
    return cleaned_text(list(small_split.valid))


@pytest.fixture(scope="session")
def char_tok(train_texts):
    return CharTokenizer.from_texts(train_texts)


@pytest.fixture(scope="session")
def byte_tok():
    return ByteTokenizer()


def tiny_flat_config(vocab_size: int, **overrides) -> ModelConfig:
    base = dict(
        vocab_size=vocab_size,
        scheme="char",
        base_layers=2,
        dim=32,
        heads=2,
        encoder_layers=0,
        worddec_layers=0,
        n_cls=1,
        max_word_len=16,
        block_chars=64,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_hier_config(vocab_size: int, **overrides) -> ModelConfig:
    base = dict(
        vocab_size=vocab_size,
        scheme="char",
        base_layers=2,
        dim=32,
        heads=2,
        encoder_layers=1,
        worddec_layers=1,
        n_cls=2,
        max_word_len=12,
        block_chars=64,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_flat_model(char_tok):
    return build_model(tiny_flat_config(char_tok.vocab_size), seed=0)


@pytest.fixture(scope="session")
def tiny_hier_model(char_tok):
    return build_model(tiny_hier_config(char_tok.vocab_size), seed=0)
