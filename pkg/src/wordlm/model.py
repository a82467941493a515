"""Three-stage hierarchical word LM and the flat causal baseline.

The hierarchical model runs in three stages over a padded word grid:

1. encode_words: bidirectional attention inside each word pools its
   base tokens into n_cls CLS embeddings (encoder_layers blocks).
2. word_lm_step: a causal decoder over words (each word is a group of
   n_cls positions) predicts the next word's CLS embeddings. This is
   the main stack (base_layers blocks) and runs once per word.
3. decode_word: a shallow causal decoder (worddec_layers blocks) reads
   the predicted CLS group as a prefix and emits base tokens until EOW.
   Generation cost per character is bounded by this stage alone, which
   is where the hierarchical speed advantage comes from.

The flat baseline is a standard GPT-style decoder over raw tokens. Both
share the transformer block (pre-layer-norm, GELU MLP) and a single
parameter registry so checkpoints and parameter counts are exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, NonFiniteError, SchemeMismatchError
from .nn import (
    AttentionMask,
    Tensor,
    cat,
    cross_entropy,
    embedding,
    gelu,
    layer_norm,
    linear,
    masked_attention,
)
from .tokenizers import CLS_ID, EOW_ID, PAD_ID, SCHEMES, TokenSeq

CHECKPOINT_MAGIC = "wordlm-checkpoint-v1"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; every tensor shape derives from these.

    A config is hierarchical when encoder_layers and worddec_layers are
    both positive, flat when both are zero; mixing is rejected.
    block_chars is the context budget in characters; block_tokens is the
    same budget in the model's own token units (equal for char models,
    scaled by the measured chars-per-token ratio otherwise).
    """

    vocab_size: int
    scheme: str
    base_layers: int = 4
    dim: int = 128
    heads: int = 4
    encoder_layers: int = 2
    worddec_layers: int = 2
    n_cls: int = 4
    max_word_len: int = 24
    block_chars: int = 192
    block_tokens: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme: {self.scheme!r}")
        if self.dim % self.heads:
            raise ConfigError(f"heads {self.heads} must divide dim {self.dim}")
        if self.n_cls < 1:
            raise ConfigError("n_cls must be >= 1")
        if self.max_word_len < 1:
            raise ConfigError("max_word_len must be >= 1")
        if self.block_chars <= 0:
            raise ConfigError("block_chars must be positive")
        if self.base_layers < 1:
            raise ConfigError("base_layers must be >= 1")
        if (self.encoder_layers > 0) != (self.worddec_layers > 0):
            raise ConfigError(
                "encoder_layers and worddec_layers must both be positive "
                "(hierarchical) or both zero (flat)"
            )
        if self.vocab_size < 6:
            raise ConfigError("vocab_size must cover the special tokens")
        if self.block_tokens == 0:
            object.__setattr__(self, "block_tokens", self.block_chars)

    @property
    def hierarchical(self) -> bool:
        return self.encoder_layers > 0

    @property
    def word_width(self) -> int:
        """Grid row width: CLS prefix + base tokens + EOW slot."""
        return self.n_cls + self.max_word_len + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class SegmentedBatch:
    """Padded word grid for the hierarchical model.

    words: [batch, max_words, n_cls + max_word_len + 1] token ids. Each
    row is CLS x n_cls, the word's base tokens, EOW, then PAD fill; rows
    past word_count are CLS x n_cls, EOW, PAD fill.
    flat_targets: same shape; the next-token target for each grid
    position (PAD marks ignored positions).
    """

    words: np.ndarray
    word_count: np.ndarray
    flat_targets: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.words.shape[0]

    @property
    def max_words(self) -> int:
        return self.words.shape[1]

    def word_lens(self) -> np.ndarray:
        """Base-token count per grid row (EOW and CLS excluded)."""
        n_cls = int((self.words[0, 0] == CLS_ID).argmin())
        body = self.words[:, :, n_cls:]
        return ((body != PAD_ID) & (body != EOW_ID)).sum(axis=-1)


def build_segmented_batch(
    seqs: list[list[list[int]]], config: ModelConfig, char_lens=None
) -> SegmentedBatch:
    """Lay out per-word token-id lists as a padded grid.

    seqs[b] is one sequence: a list of words, each a list of base-token
    ids. Words longer than max_word_len are split into consecutive
    pseudo-words. char_lens optionally gives the character count per
    word (defaults to token count) for the per-sequence budget check.
    """
    if not seqs:
        raise ConfigError("empty batch")
    split_seqs: list[list[list[int]]] = []
    for b, words in enumerate(seqs):
        chars = char_lens[b] if char_lens is not None else [len(w) for w in words]
        if sum(chars) > config.block_chars:
            raise ConfigError(
                f"sequence {b} holds {sum(chars)} base characters, "
                f"budget is {config.block_chars}"
            )
        out: list[list[int]] = []
        for w in words:
            if not w:
                raise ConfigError("empty word in batch")
            for i in range(0, len(w), config.max_word_len):
                out.append(w[i : i + config.max_word_len])
        if not out:
            raise ConfigError(f"sequence {b} has no words")
        split_seqs.append(out)

    width = config.word_width
    max_words = max(len(s) for s in split_seqs)
    grid = np.full((len(split_seqs), max_words, width), PAD_ID, dtype=np.int64)
    targets = np.full_like(grid, PAD_ID)
    counts = np.zeros(len(split_seqs), dtype=np.int64)
    grid[:, :, : config.n_cls] = CLS_ID
    grid[:, :, config.n_cls] = EOW_ID
    for b, words in enumerate(split_seqs):
        counts[b] = len(words)
        for w, toks in enumerate(words):
            row = [CLS_ID] * config.n_cls + toks + [EOW_ID]
            grid[b, w, : len(row)] = row
            # position p predicts row[p+1]; CLS positions before the
            # last one predict nothing
            targets[b, w, config.n_cls - 1 : len(row) - 1] = row[config.n_cls :]
    return SegmentedBatch(words=grid, word_count=counts, flat_targets=targets)


def build_encoder_mask(word_lens: list, n_cls: int) -> AttentionMask:
    """Block-diagonal bidirectional mask for a packed multi-word layout.

    Block i spans n_cls + word_lens[i] positions; attention stays inside
    its block.
    """
    if n_cls < 1:
        raise ConfigError("n_cls must be >= 1")
    if not word_lens or any(ln < 1 for ln in word_lens):
        raise ConfigError("word lengths must all be >= 1")
    sizes = [n_cls + int(ln) for ln in word_lens]
    total = sum(sizes)
    allow = np.zeros((total, total), dtype=bool)
    start = 0
    for size in sizes:
        allow[start : start + size, start : start + size] = True
        start += size
    return AttentionMask(allow)


def _group_causal_mask(n_groups: int, group_size: int) -> AttentionMask:
    """Causal at group granularity; attention inside a group is unrestricted."""
    g = np.arange(n_groups * group_size) // group_size
    return AttentionMask(g[None, :] <= g[:, None])


# -- parameter registry ------------------------------------------------------


def _block_shapes(prefix: str, dim: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.ln1_g": (dim,),
        f"{prefix}.ln1_b": (dim,),
        f"{prefix}.qkv_w": (dim, 3 * dim),
        f"{prefix}.qkv_b": (3 * dim,),
        f"{prefix}.proj_w": (dim, dim),
        f"{prefix}.proj_b": (dim,),
        f"{prefix}.ln2_g": (dim,),
        f"{prefix}.ln2_b": (dim,),
        f"{prefix}.fc_w": (dim, 4 * dim),
        f"{prefix}.fc_b": (4 * dim,),
        f"{prefix}.out_w": (4 * dim, dim),
        f"{prefix}.out_b": (dim,),
    }


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter tensor, fixed by the config."""
    d = config.dim
    shapes: dict[str, tuple[int, ...]] = {"wte": (config.vocab_size, d)}
    if config.hierarchical:
        shapes["enc_pos"] = (config.word_width, d)
        shapes["dec_pos"] = (config.word_width, d)
        shapes["word_pos"] = (config.block_chars + 1, d)
        shapes["start"] = (config.n_cls, d)
        for i in range(config.encoder_layers):
            shapes.update(_block_shapes(f"enc.{i}", d))
        shapes["enc_lnf_g"] = (d,)
        shapes["enc_lnf_b"] = (d,)
        shapes["h_lnf_g"] = (d,)
        shapes["h_lnf_b"] = (d,)
        for i in range(config.worddec_layers):
            shapes.update(_block_shapes(f"dec.{i}", d))
    else:
        shapes["pos"] = (config.block_tokens + 1, d)
    for i in range(config.base_layers):
        shapes.update(_block_shapes(f"h.{i}", d))
    shapes["lnf_g"] = (d,)
    shapes["lnf_b"] = (d,)
    shapes["head"] = (d, config.vocab_size)
    return shapes


def count_params(config: ModelConfig) -> int:
    """Exact trainable parameter count, by enumerating every named tensor."""
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Weights ~ Normal(0, 0.02); biases and layer-norm shifts 0; gains 1."""
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_b") or leaf == "start":
            data = np.zeros(shape, dtype=np.float32)
        elif leaf.endswith("_g"):
            data = np.ones(shape, dtype=np.float32)
        else:
            data = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True)
    return params


# -- shared transformer pieces ----------------------------------------------


def _block_forward(params, prefix: str, x: Tensor, mask, heads: int) -> Tensor:
    d = x.shape[-1]
    h = layer_norm(x, params[f"{prefix}.ln1_g"], params[f"{prefix}.ln1_b"])
    qkv = linear(h, params[f"{prefix}.qkv_w"], params[f"{prefix}.qkv_b"])
    q = qkv[..., 0 * d : 1 * d]
    k = qkv[..., 1 * d : 2 * d]
    v = qkv[..., 2 * d : 3 * d]
    a = masked_attention(q, k, v, mask, heads)
    x = x + linear(a, params[f"{prefix}.proj_w"], params[f"{prefix}.proj_b"])
    h = layer_norm(x, params[f"{prefix}.ln2_g"], params[f"{prefix}.ln2_b"])
    h = linear(gelu(linear(h, params[f"{prefix}.fc_w"], params[f"{prefix}.fc_b"])),
               params[f"{prefix}.out_w"], params[f"{prefix}.out_b"])
    return x + h


def _stack(params, stage: str, n_layers: int, x: Tensor, mask, heads: int) -> Tensor:
    for i in range(n_layers):
        x = _block_forward(params, f"{stage}.{i}", x, mask, heads)
    return x


class _ModelBase:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params = params if params is not None else init_params(config, rng)
        expected = param_shapes(config)
        got = {k: tuple(v.shape) for k, v in self.params.items()}
        if got != expected:
            raise ConfigError("parameter registry does not match config")

    def named_params(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class FlatLM(_ModelBase):
    """Causal decoder over raw tokens; position t predicts token t+1."""

    def __init__(self, config: ModelConfig, params=None, seed: int = 0):
        if config.hierarchical:
            raise ConfigError("FlatLM needs a flat config (0 aux layers)")
        super().__init__(config, params, seed)

    def forward_ids(self, ids: np.ndarray) -> Tensor:
        """Logits for a [batch, length] or [length] id array."""
        ids = np.asarray(ids, dtype=np.int64)
        length = ids.shape[-1]
        if length > self.config.block_tokens + 1:
            raise ConfigError(
                f"sequence length {length} over context budget "
                f"{self.config.block_tokens + 1}"
            )
        p = self.params
        x = embedding(p["wte"], ids) + p["pos"][:length]
        mask = AttentionMask.causal(length)
        x = _stack(p, "h", self.config.base_layers, x, mask, self.config.heads)
        x = layer_norm(x, p["lnf_g"], p["lnf_b"])
        return x @ p["head"]

    def flat_forward(self, ids: TokenSeq) -> Tensor:
        if ids.scheme != self.config.scheme:
            raise SchemeMismatchError(
                f"model scheme {self.config.scheme!r} got ids for {ids.scheme!r}"
            )
        if len(ids) == 0:
            raise ConfigError("empty token sequence")
        return self.forward_ids(np.array(ids.ids, dtype=np.int64))

    def loss(self, ids: np.ndarray, targets: np.ndarray) -> Tensor:
        logits = self.forward_ids(ids)
        return cross_entropy(logits, targets, ignore_id=PAD_ID)


class HierarchicalLM(_ModelBase):
    """Word encoder + word-level decoder + per-word base-token decoder."""

    def __init__(self, config: ModelConfig, params=None, seed: int = 0):
        if not config.hierarchical:
            raise ConfigError("HierarchicalLM needs encoder and word-decoder layers")
        super().__init__(config, params, seed)

    # -- stage 1 ---------------------------------------------------------

    def encode_words(self, batch: SegmentedBatch) -> Tensor:
        """CLS embeddings per word: [batch, max_words, n_cls, dim]."""
        cfg = self.config
        p = self.params
        grid = batch.words
        b, w, width = grid.shape
        if width != cfg.word_width:
            raise ConfigError(f"grid width {width} != config width {cfg.word_width}")
        x = embedding(p["wte"], grid) + p["enc_pos"]
        x = x.reshape(b * w, width, cfg.dim)
        valid = (grid != PAD_ID).reshape(b * w, width)
        allow = valid[:, :, None] & valid[:, None, :]
        allow |= np.eye(width, dtype=bool)
        x = _stack(p, "enc", cfg.encoder_layers, x, allow[:, None], cfg.heads)
        x = layer_norm(x, p["enc_lnf_g"], p["enc_lnf_b"])
        return x[:, : cfg.n_cls, :].reshape(b, w, cfg.n_cls, cfg.dim)

    # -- stage 2 ---------------------------------------------------------

    def word_lm_step(self, word_reps: Tensor) -> Tensor:
        """Predict each word's CLS group from strictly earlier words.

        This is the main base_layers stack; input for word i's prediction
        is the learned start group followed by words 0..i-1.
        """
        cfg = self.config
        p = self.params
        b, w, n_cls, d = word_reps.shape
        start = p["start"].reshape(1, n_cls, d).broadcast_to((b, n_cls, d))
        prev = word_reps[:, : w - 1].reshape(b, (w - 1) * n_cls, d)
        x = cat([start, prev], axis=1)
        pos_ids = np.repeat(np.arange(w), n_cls)
        x = x + embedding(p["word_pos"], pos_ids)
        mask = _group_causal_mask(w, n_cls)
        x = _stack(p, "h", cfg.base_layers, x, mask, cfg.heads)
        x = layer_norm(x, p["h_lnf_g"], p["h_lnf_b"])
        return x.reshape(b, w, n_cls, d)

    def predict_next_cls(self, word_reps: Tensor) -> Tensor:
        """CLS' group for the word after the last given one: [b, n_cls, d]."""
        cfg = self.config
        p = self.params
        b, w, n_cls, d = word_reps.shape
        if w > self.config.block_chars:
            raise ConfigError("word window exceeds the character budget")
        start = p["start"].reshape(1, n_cls, d).broadcast_to((b, n_cls, d))
        x = cat([start, word_reps.reshape(b, w * n_cls, d)], axis=1)
        pos_ids = np.repeat(np.arange(w + 1), n_cls)
        x = x + embedding(p["word_pos"], pos_ids)
        mask = _group_causal_mask(w + 1, n_cls)
        x = _stack(p, "h", cfg.base_layers, x, mask, cfg.heads)
        x = layer_norm(x, p["h_lnf_g"], p["h_lnf_b"])
        return x.reshape(b, w + 1, n_cls, d)[:, w]

    # -- stage 3 ---------------------------------------------------------

    def decode_grid(self, cls_pred: Tensor, batch: SegmentedBatch) -> Tensor:
        """Teacher-forced logits for every grid position: [b, w, width, V]."""
        cfg = self.config
        p = self.params
        b, w, _, d = cls_pred.shape
        width = cfg.word_width
        tail_ids = batch.words[:, :, cfg.n_cls :]
        tail = embedding(p["wte"], tail_ids)
        x = cat([cls_pred, tail], axis=2) + p["dec_pos"]
        x = x.reshape(b * w, width, d)
        mask = AttentionMask.causal(width)
        x = _stack(p, "dec", cfg.worddec_layers, x, mask, cfg.heads)
        x = layer_norm(x, p["lnf_g"], p["lnf_b"])
        return (x @ p["head"]).reshape(b, w, width, cfg.vocab_size)

    def decode_word(self, cls_pred: Tensor, prefix_tokens) -> Tensor:
        """Next-token logits [V] after a CLS' prefix and decoded tokens."""
        cfg = self.config
        p = self.params
        prefix = list(prefix_tokens)
        if len(prefix) >= cfg.max_word_len:
            raise ConfigError(
                f"prefix length {len(prefix)} must stay under {cfg.max_word_len}"
            )
        if cls_pred.shape != (cfg.n_cls, cfg.dim):
            raise ConfigError("cls_pred must be one [n_cls, dim] group")
        parts = [cls_pred]
        if prefix:
            parts.append(embedding(p["wte"], np.array(prefix, dtype=np.int64)))
        length = cfg.n_cls + len(prefix)
        x = cat(parts, axis=0) if len(parts) > 1 else cls_pred
        x = x + p["dec_pos"][:length]
        mask = AttentionMask.causal(length)
        x = _stack(p, "dec", cfg.worddec_layers, x, mask, cfg.heads)
        x = layer_norm(x, p["lnf_g"], p["lnf_b"])
        return (x[length - 1 :] @ p["head"]).reshape(cfg.vocab_size)

    # -- full pipeline -----------------------------------------------------

    def forward(self, batch: SegmentedBatch) -> Tensor:
        return self.decode_grid(self.word_lm_step(self.encode_words(batch)), batch)

    def loss(self, batch: SegmentedBatch) -> Tensor:
        logits = self.forward(batch)
        return cross_entropy(logits, batch.flat_targets, ignore_id=PAD_ID)


def build_model(config: ModelConfig, params=None, seed: int = 0):
    cls = HierarchicalLM if config.hierarchical else FlatLM
    return cls(config, params=params, seed=seed)


# -- checkpoints ---------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    model,
    optimizer_state: dict | None = None,
    epoch: int = 0,
    rng_state: dict | None = None,
) -> None:
    """Write config + tensors as a JSON manifest followed by raw float32.

    Layout: uint64 manifest length, manifest JSON (UTF-8), then each
    tensor's little-endian float32 payload at its recorded offset.
    """
    entries = []
    payloads = []
    offset = 0

    def add(name: str, arr: np.ndarray):
        nonlocal offset
        flat = np.ascontiguousarray(arr, dtype="<f4")
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset}
        )
        payloads.append(flat.tobytes())
        offset += flat.nbytes

    for name, p in model.named_params().items():
        add(name, p.data)
    opt_manifest = None
    if optimizer_state is not None:
        opt_manifest = {"step": optimizer_state["step"], "moments": []}
        for kind in ("m", "v"):
            for name, arr in optimizer_state[kind].items():
                entry_name = f"opt.{kind}.{name}"
                add(entry_name, arr)
                opt_manifest["moments"].append(entry_name)
    manifest = {
        "format": CHECKPOINT_MAGIC,
        "config": model.config.to_dict(),
        "epoch": int(epoch),
        "rng_state": rng_state,
        "tensors": entries,
        "optimizer": opt_manifest,
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in payloads:
            fh.write(chunk)


@dataclass(frozen=True)
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer_state: dict | None
    epoch: int
    rng_state: dict | None


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise ConfigError(f"truncated checkpoint: {path}")
    (manifest_len,) = struct.unpack_from("<Q", raw)
    if len(raw) < 8 + manifest_len:
        raise ConfigError(f"checkpoint manifest truncated: {path}")
    manifest = json.loads(raw[8 : 8 + manifest_len].decode("utf-8"))
    if manifest.get("format") != CHECKPOINT_MAGIC:
        raise ConfigError(f"not a model checkpoint: {path}")
    payload = raw[8 + manifest_len :]
    total = sum(
        4 * int(np.prod(e["shape"])) if e["shape"] else 4 for e in manifest["tensors"]
    )
    if len(payload) != total:
        raise ConfigError(
            f"checkpoint payload holds {len(payload)} bytes, manifest says {total}"
        )
    tensors: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(
            payload, dtype="<f4", count=n, offset=e["offset"]
        ).reshape(e["shape"]).astype(np.float32)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"checkpoint tensor {e['name']} has non-finite values")
        tensors[e["name"]] = arr
    config = ModelConfig.from_dict(manifest["config"])
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    expected = param_shapes(config)
    got = {k: tuple(v.shape) for k, v in params.items()}
    if got != expected:
        raise ConfigError("checkpoint tensors do not match its config")
    opt = None
    if manifest.get("optimizer"):
        opt = {"step": manifest["optimizer"]["step"], "m": {}, "v": {}}
        for entry_name in manifest["optimizer"]["moments"]:
            _, kind, name = entry_name.split(".", 2)
            opt[kind][name] = tensors[entry_name]
    return Checkpoint(
        config=config,
        params=params,
        optimizer_state=opt,
        epoch=int(manifest["epoch"]),
        rng_state=manifest.get("rng_state"),
    )


def model_from_checkpoint(ckpt: Checkpoint):
    params = {k: Tensor(v, requires_grad=True) for k, v in ckpt.params.items()}
    return build_model(ckpt.config, params=params)


def scaled_config(config: ModelConfig, **overrides) -> ModelConfig:
    return replace(config, **overrides)
