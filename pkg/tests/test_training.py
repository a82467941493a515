"""Optimizer recurrence, batch layout, and resume guarantees."""

import json

import numpy as np
import pytest

from conftest import tiny_flat_config, tiny_hier_config

from wordlm.errors import ConfigError, CorpusError, NonFiniteError
from wordlm.model import build_model, load_checkpoint
from wordlm.nn import Tensor
from wordlm.tokenizers import BOS_ID, PAD_ID
from wordlm.training import (
    AdamW,
    TrainConfig,
    flat_blocks,
    hier_batches,
    hier_spans,
    make_batches,
    train,
)

# a corpus small enough that multi-epoch runs stay under a second
MICRO_TRAIN = [
    "the cat sat on the mat and the dog ran to the barn . "
    "a bird flew over the pond while the fox slept near the wall . "
    "the farmer counted ten sheep and four goats before noon .",
    "rain fell on the field all day and the river rose fast . "
    "the miller ground the grain and the baker made warm bread .",
]
MICRO_VALID = ["the cat ran to the pond and the dog sat on the wall ."]


def reference_adamw(p0, grads, lr, betas, wd, eps):
    """Textbook decoupled-decay recurrence in float64."""
    p = p0.astype(np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    b1, b2 = betas
    for t, g in enumerate(grads, start=1):
        p *= 1.0 - lr * wd
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        p -= lr * (m / (1.0 - b1**t)) / (np.sqrt(v / (1.0 - b2**t)) + eps)
    return p


class TestAdamW:
    def test_matches_reference_trace_100_steps(self):
        rng = np.random.default_rng(7)
        p0 = rng.normal(size=5)
        grads = [rng.normal(size=5) for _ in range(100)]
        param = Tensor(p0.copy())
        opt = AdamW({"w": param}, lr=3e-3, betas=(0.9, 0.999), weight_decay=0.1)
        for g in grads:
            param.grad = g.copy()
            opt.step()
        expect = reference_adamw(p0, grads, 3e-3, (0.9, 0.999), 0.1, opt.eps)
        np.testing.assert_allclose(param.data, expect, rtol=1e-12, atol=1e-15)

    def test_quadratic_converges(self):
        x = Tensor(np.array([0.0]))
        opt = AdamW({"x": x}, lr=0.1, weight_decay=0.0)
        for _ in range(400):
            x.grad = 2.0 * (x.data - 3.0)
            opt.step()
        assert abs(float(x.data[0]) - 3.0) < 1e-6

    def test_missing_grad_decays_only(self):
        x = Tensor(np.array([2.0, -1.5]))
        lr, wd = 1e-2, 0.1
        opt = AdamW({"x": x}, lr=lr, weight_decay=wd)
        expect = np.array([2.0, -1.5])
        for _ in range(5):
            x.grad = None
            opt.step()
            expect *= 1.0 - lr * wd
        np.testing.assert_array_equal(x.data, expect)

    def test_grad_clip_rescales_global_norm(self):
        g1 = np.array([3.0])
        g2 = np.array([4.0])  # global norm 5, clip 1 -> scale 1/5
        a, b = Tensor(np.zeros(1)), Tensor(np.zeros(1))
        opt = AdamW({"a": a, "b": b}, lr=1e-2, weight_decay=0.0, grad_clip=1.0)
        a.grad, b.grad = g1, g2
        opt.step()
        a2, b2 = Tensor(np.zeros(1)), Tensor(np.zeros(1))
        ref = AdamW({"a": a2, "b": b2}, lr=1e-2, weight_decay=0.0)
        a2.grad, b2.grad = g1 / 5.0, g2 / 5.0
        ref.step()
        np.testing.assert_allclose(a.data, a2.data, rtol=1e-12)
        np.testing.assert_allclose(b.data, b2.data, rtol=1e-12)

    def test_grad_clip_inactive_below_threshold(self):
        g = np.array([0.3])
        a = Tensor(np.ones(1))
        b = Tensor(np.ones(1))
        clipped = AdamW({"p": a}, lr=1e-2, grad_clip=10.0)
        plain = AdamW({"p": b}, lr=1e-2)
        a.grad = g.copy()
        b.grad = g.copy()
        clipped.step()
        plain.step()
        np.testing.assert_array_equal(a.data, b.data)

    def test_nonfinite_grad_names_parameter(self):
        x = Tensor(np.ones(2))
        opt = AdamW({"h_0_attn_w": x}, lr=1e-3)
        x.grad = np.array([1.0, np.nan])
        with pytest.raises(NonFiniteError, match="h_0_attn_w"):
            opt.step()

    def test_state_round_trip(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=4))
        opt = AdamW({"x": x}, lr=1e-2)
        for _ in range(3):
            x.grad = rng.normal(size=4)
            opt.step()
        state = opt.state_dict()
        y = Tensor(x.data.copy())
        opt2 = AdamW({"x": y}, lr=1e-2)
        opt2.load_state(state)
        g = rng.normal(size=4)
        x.grad = g.copy()
        y.grad = g.copy()
        opt.step()
        opt2.step()
        np.testing.assert_array_equal(x.data, y.data)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"lr": 0.0}, {"lr": -1.0}, {"batch_size": 0}, {"epochs": 0}, {"eval_every": 0}],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestFlatBlocks:
    def test_exact_blocks_and_tail_drop(self, char_tok):
        texts = ["ab cd ef", "gh ij"]
        stream = np.array(char_tok.encode(" ".join(texts)).ids)
        blocks = flat_blocks(texts, char_tok, block_tokens=4)
        assert len(blocks) == len(stream) // 4
        assert all(b.shape == (4,) for b in blocks)
        np.testing.assert_array_equal(np.concatenate(blocks), stream[: 4 * len(blocks)])

    def test_too_short_corpus(self, char_tok):
        with pytest.raises(CorpusError):
            flat_blocks(["ab"], char_tok, block_tokens=50)


class TestHierSpans:
    def test_greedy_packing_and_tail_drop(self):
        spans = hier_spans(["aa bb cc dd"], block_chars=5)
        assert spans == [["aa", "bb"]]  # [cc, dd] is the truncated tail

    def test_span_text_fits_budget(self):
        spans = hier_spans(MICRO_TRAIN, block_chars=24)
        assert len(spans) >= 10
        for span in spans:
            assert len(" ".join(span)) <= 24
        # greedy: the first word of the next span would not have fit
        for cur, nxt in zip(spans, spans[1:]):
            assert len(" ".join(cur)) + 1 + len(nxt[0]) > 24

    def test_overlong_word_chunked(self):
        spans = hier_spans(["abcdefghij"], block_chars=4)
        assert spans == [["abcd"], ["efgh"]]  # the 2-char tail chunk is dropped

    def test_words_kept_in_order(self):
        spans = hier_spans(MICRO_TRAIN, block_chars=30)
        flattened = [w for span in spans for w in span]
        all_words = []
        from wordlm.corpus import segment_words

        for t in MICRO_TRAIN:
            all_words.extend(segment_words(t).words)
        assert flattened == all_words[: len(flattened)]

    def test_too_short_corpus(self):
        with pytest.raises(CorpusError):
            hier_spans(["hi"], block_chars=64)


class TestMakeBatches:
    def test_flat_shapes_and_shift(self, char_tok):
        cfg = tiny_flat_config(char_tok.vocab_size, block_chars=16)
        tc = TrainConfig(batch_size=2, seed=0)
        batches = make_batches(MICRO_TRAIN, char_tok, cfg, tc, epoch=0)
        assert len(batches) >= 3
        for inputs, targets in batches:
            assert inputs.shape == targets.shape == (inputs.shape[0], 17)
            assert (inputs[:, 0] == BOS_ID).all()
            np.testing.assert_array_equal(inputs[:, 1:], targets[:, :-1])
            assert (targets[:, -1] == PAD_ID).all()

    def test_same_seed_epoch_is_bitwise_stable(self, char_tok):
        cfg = tiny_flat_config(char_tok.vocab_size, block_chars=16)
        tc = TrainConfig(batch_size=2, seed=5)
        b1 = make_batches(MICRO_TRAIN, char_tok, cfg, tc, epoch=2)
        b2 = make_batches(MICRO_TRAIN, char_tok, cfg, tc, epoch=2)
        assert len(b1) == len(b2)
        for (i1, t1), (i2, t2) in zip(b1, b2):
            np.testing.assert_array_equal(i1, i2)
            np.testing.assert_array_equal(t1, t2)

    def test_epoch_reshuffles_same_blocks(self, char_tok):
        cfg = tiny_flat_config(char_tok.vocab_size, block_chars=16)
        tc = TrainConfig(batch_size=1, seed=0)
        e0 = [tuple(i[0].tolist()) for i, _ in make_batches(MICRO_TRAIN, char_tok, cfg, tc, 0)]
        e1 = [tuple(i[0].tolist()) for i, _ in make_batches(MICRO_TRAIN, char_tok, cfg, tc, 1)]
        assert e0 != e1
        assert sorted(e0) == sorted(e1)

    def test_hier_spans_reordered_not_rewritten(self, char_tok):
        cfg = tiny_hier_config(char_tok.vocab_size, block_chars=24)
        tc = TrainConfig(batch_size=2, seed=0)
        batches = make_batches(MICRO_TRAIN, char_tok, cfg, tc, epoch=0)
        counts = sorted(int(c) for b in batches for c in b.word_count)
        plain = hier_batches(MICRO_TRAIN, char_tok, cfg, batch_size=2)
        counts_plain = sorted(int(c) for b in plain for c in b.word_count)
        assert counts == counts_plain


def _micro_train(tmp_path, name, epochs, eval_every=2, resume=False, seed=11, tok=None):
    cfg = tiny_flat_config(tok.vocab_size, block_chars=32)
    model = build_model(cfg, seed=seed)
    tc = TrainConfig(
        lr=1e-3,
        batch_size=2,
        block_chars=32,
        epochs=epochs,
        seed=3,
        eval_every=eval_every,
        eval_positions=5,
        eval_blocks=2,
    )
    result = train(
        model, tok, MICRO_TRAIN, MICRO_VALID, tc, tmp_path / name, resume=resume
    )
    return model, result


class TestTrainLoop:
    def test_resume_is_bit_identical(self, tmp_path, char_tok):
        full, _ = _micro_train(tmp_path, "full", epochs=4, tok=char_tok)
        _micro_train(tmp_path, "split", epochs=2, tok=char_tok)
        resumed, _ = _micro_train(
            tmp_path, "split", epochs=4, resume=True, seed=999, tok=char_tok
        )
        for name in full.params:
            np.testing.assert_array_equal(full.params[name].data, resumed.params[name].data)
        a = (tmp_path / "full" / "metrics.jsonl").read_bytes()
        b = (tmp_path / "split" / "metrics.jsonl").read_bytes()
        assert a == b

    def test_metrics_jsonl_schema(self, tmp_path, char_tok):
        _, result = _micro_train(tmp_path, "m", epochs=2, eval_every=1, tok=char_tok)
        lines = (tmp_path / "m" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2
        for i, line in enumerate(lines):
            entry = json.loads(line)
            assert set(entry) == {"epoch", "step", "train_loss", "val_word_acc", "val_char_acc"}
            assert entry["epoch"] == i + 1
            assert 0.0 <= entry["val_word_acc"] <= 100.0
            assert 0.0 <= entry["val_char_acc"] <= 100.0
        assert result.log == [json.loads(line) for line in lines]

    def test_final_epoch_always_checkpointed(self, tmp_path, char_tok):
        model, result = _micro_train(tmp_path, "c", epochs=3, eval_every=5, tok=char_tok)
        ckpt = load_checkpoint(tmp_path / "c" / "checkpoints" / "latest.ckpt")
        assert ckpt.epoch == 3
        assert np.isfinite(result.final_loss)
        resumed, _ = _micro_train(
            tmp_path, "c", epochs=4, eval_every=5, resume=True, tok=char_tok
        )

    def test_resume_without_checkpoint_rejected(self, tmp_path, char_tok):
        with pytest.raises(ConfigError):
            _micro_train(tmp_path, "nowhere", epochs=1, resume=True, tok=char_tok)

    def test_loss_decreases_over_epochs(self, tmp_path, char_tok):
        _, result = _micro_train(tmp_path, "d", epochs=4, eval_every=1, tok=char_tok)
        losses = [e["train_loss"] for e in result.log]
        assert losses[-1] < losses[0]

    def test_hier_loop_end_to_end(self, tmp_path, char_tok):
        cfg = tiny_hier_config(char_tok.vocab_size, block_chars=24)
        model = build_model(cfg, seed=2)
        tc = TrainConfig(
            lr=1e-3,
            batch_size=2,
            block_chars=24,
            epochs=1,
            eval_positions=4,
            eval_blocks=1,
        )
        result = train(model, char_tok, MICRO_TRAIN, MICRO_VALID, tc, tmp_path / "h")
        assert np.isfinite(result.final_loss)
        entry = result.log[0]
        assert 0.0 <= entry["val_word_acc"] <= 100.0
        assert (tmp_path / "h" / "checkpoints" / "latest.ckpt").exists()
