"""Deterministic teacher-forced training with AdamW.

Batch order is a pure function of (seed, epoch), no RNG object survives
between epochs, and checkpoints carry optimizer moments plus the seed
record, so a resumed run is bit-identical to an uninterrupted one under
a fixed BLAS thread count.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import segment_words
from .errors import ConfigError, CorpusError, NonFiniteError
from .model import (
    ModelConfig,
    SegmentedBatch,
    build_segmented_batch,
    load_checkpoint,
    save_checkpoint,
)
from .nn import Tensor
from .tokenizers import BOS_ID, PAD_ID


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 2
    block_chars: int = 192
    epochs: int = 1
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.1
    seed: int = 0
    eval_every: int = 1
    grad_clip: float | None = None
    eval_positions: int = 60
    eval_blocks: int = 8

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


# -- data layout ---------------------------------------------------------


def flat_blocks(texts: list[str], tokenizer, block_tokens: int) -> list[np.ndarray]:
    """Exact block_tokens-sized id blocks over the joined corpus; tail dropped."""
    stream = tokenizer.encode(" ".join(texts)).ids
    n_full = len(stream) // block_tokens
    if n_full == 0:
        raise CorpusError(
            f"corpus has {len(stream)} tokens, shorter than one {block_tokens}-token block"
        )
    arr = np.array(stream[: n_full * block_tokens], dtype=np.int64)
    return list(arr.reshape(n_full, block_tokens))


def hier_spans(texts: list[str], block_chars: int) -> list[list[str]]:
    """Greedy word spans whose text length (spaces included) fits block_chars.

    The final stream-truncated span is dropped, mirroring the flat
    scheme's partial-block rule.
    """
    words: list[str] = []
    for text in texts:
        for w in segment_words(text).words:
            if len(w) > block_chars:
                words.extend(
                    w[i : i + block_chars] for i in range(0, len(w), block_chars)
                )
            else:
                words.append(w)
    spans: list[list[str]] = []
    cur: list[str] = []
    cur_chars = 0
    for w in words:
        cost = len(w) + (1 if cur else 0)
        if cur and cur_chars + cost > block_chars:
            spans.append(cur)
            cur = [w]
            cur_chars = len(w)
        else:
            cur.append(w)
            cur_chars += cost
    if len(spans) == 0:
        raise CorpusError(f"corpus shorter than one {block_chars}-char span")
    return spans


def hier_batches(
    texts: list[str], tokenizer, config: ModelConfig, batch_size: int
) -> list[SegmentedBatch]:
    """Deterministically ordered segmented batches (no shuffling)."""
    spans = hier_spans(texts, config.block_chars)
    seqs = [[tokenizer.encode_word(w) for w in span] for span in spans]
    chars = [[len(w) for w in span] for span in spans]
    return [
        build_segmented_batch(seqs[i : i + batch_size], config, chars[i : i + batch_size])
        for i in range(0, len(seqs), batch_size)
    ]


def make_batches(
    texts: list[str],
    tokenizer,
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: int,
):
    """Shuffled training batches; order is a pure function of seed and epoch."""
    rng = np.random.default_rng([train_config.seed, epoch])
    bs = train_config.batch_size
    if model_config.hierarchical:
        spans = hier_spans(texts, model_config.block_chars)
        order = rng.permutation(len(spans))
        spans = [spans[i] for i in order]
        seqs = [[tokenizer.encode_word(w) for w in span] for span in spans]
        chars = [[len(w) for w in span] for span in spans]
        return [
            build_segmented_batch(seqs[i : i + bs], model_config, chars[i : i + bs])
            for i in range(0, len(seqs), bs)
        ]
    blocks = flat_blocks(texts, tokenizer, model_config.block_tokens)
    order = rng.permutation(len(blocks))
    batches = []
    for i in range(0, len(order), bs):
        group = np.stack([blocks[j] for j in order[i : i + bs]])
        inputs = np.concatenate(
            [np.full((group.shape[0], 1), BOS_ID, dtype=np.int64), group], axis=1
        )
        targets = np.concatenate(
            [group, np.full((group.shape[0], 1), PAD_ID, dtype=np.int64)], axis=1
        )
        batches.append((inputs, targets))
    return batches


# -- optimizer -----------------------------------------------------------


class AdamW:
    """Decoupled weight decay, bias-corrected moments.

    Update order per step: p *= 1 - lr*wd, then the moment update
    p -= lr * mhat / (sqrt(vhat) + eps). Math stays in the parameter
    dtype, so float64 runs reproduce the reference recurrence exactly.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        weight_decay: float = 0.1,
        eps: float = 1e-8,
        grad_clip: float | None = None,
    ):
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.weight_decay = weight_decay
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
            grads[name] = g
        if self.grad_clip is not None:
            norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            p.data *= 1.0 - self.lr * self.weight_decay
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            mhat = self.m[name] / c1
            vhat = self.v[name] / c2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self) -> dict:
        return {"step": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["step"])
        for name in self.params:
            self.m[name] = np.array(state["m"][name], dtype=self.m[name].dtype)
            self.v[name] = np.array(state["v"][name], dtype=self.v[name].dtype)


def train_step(model, batch, optimizer: AdamW) -> float:
    """One forward/backward/update; returns the finite scalar loss."""
    model.zero_grad()
    if isinstance(batch, SegmentedBatch):
        loss = model.loss(batch)
    else:
        inputs, targets = batch
        loss = model.loss(inputs, targets)
    loss.backward()
    optimizer.step()
    return loss.item()


# -- training loop ---------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: Path
    log: list[dict] = field(default_factory=list)
    final_loss: float = float("nan")


def train(
    model,
    tokenizer,
    train_texts: list[str],
    valid_texts: list[str],
    config: TrainConfig,
    out_dir: str | Path,
    resume: bool = False,
    log_fn=None,
) -> TrainResult:
    """Run epochs with periodic evaluation, checkpointing, and JSONL metrics.

    Checkpoints go to out_dir/checkpoints/latest.ckpt (atomic replace) at
    every evaluation; metrics append to out_dir/metrics.jsonl. Passing
    resume=True picks up from the latest checkpoint bit-exactly.
    """
    from .evaluation import char_accuracy, word_prediction_accuracy

    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    latest = ckpt_dir / "latest.ckpt"
    metrics_path = out_dir / "metrics.jsonl"

    optimizer = AdamW(
        model.named_params(),
        lr=config.lr,
        betas=config.betas,
        weight_decay=config.weight_decay,
        grad_clip=config.grad_clip,
    )
    start_epoch = 0
    if resume:
        if not latest.exists():
            raise ConfigError(f"cannot resume: {latest} does not exist")
        ckpt = load_checkpoint(latest)
        if ckpt.config != model.config:
            raise ConfigError("checkpoint config does not match model")
        for name, arr in ckpt.params.items():
            model.params[name].data = arr.copy()
        if ckpt.optimizer_state is not None:
            optimizer.load_state(ckpt.optimizer_state)
        start_epoch = ckpt.epoch

    log: list[dict] = []
    result = TrainResult(checkpoint_path=latest, log=log)
    step = optimizer.t
    for epoch in range(start_epoch, config.epochs):
        batches = make_batches(train_texts, tokenizer, model.config, config, epoch)
        losses = []
        for batch in batches:
            losses.append(train_step(model, batch, optimizer))
            step += 1
        last_epoch = epoch + 1 == config.epochs
        if (epoch + 1) % config.eval_every != 0:
            if last_epoch:  # a run always ends resumable
                result.final_loss = float(np.mean(losses))
                _atomic_checkpoint(
                    latest,
                    model,
                    optimizer_state=optimizer.state_dict(),
                    epoch=epoch + 1,
                    rng_state={"seed": config.seed, "next_epoch": epoch + 1},
                )
            continue
        val_word, _ = word_prediction_accuracy(
            model,
            tokenizer,
            valid_texts,
            budget=config.block_chars,
            max_positions=config.eval_positions,
        )
        val_char = char_accuracy(
            model,
            tokenizer,
            valid_texts,
            budget=config.block_chars,
            max_blocks=config.eval_blocks,
        )
        entry = {
            "epoch": epoch + 1,
            "step": step,
            "train_loss": float(np.mean(losses)),
            "val_word_acc": val_word,
            "val_char_acc": val_char,
        }
        log.append(entry)
        with open(metrics_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if log_fn is not None:
            log_fn(entry)
        _atomic_checkpoint(
            latest,
            model,
            optimizer_state=optimizer.state_dict(),
            epoch=epoch + 1,
            rng_state={"seed": config.seed, "next_epoch": epoch + 1},
        )
        result.final_loss = entry["train_loss"]
    return result


def _atomic_checkpoint(path: Path, model, **kwargs) -> None:
    tmp = path.with_suffix(".tmp")
    save_checkpoint(tmp, model, **kwargs)
    os.replace(tmp, path)
