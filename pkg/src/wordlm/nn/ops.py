"""Fused network ops with hand-written backward passes.

Each op here either gathers by integer index (embedding, cross_entropy)
or needs an internal -inf / rescaling step that must not escape as a
tensor value (masked_softmax, layer_norm). Everything else composes
from tensor primitives. All backward passes are validated against
central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, MaskError
from .tensor import Tensor, _ensure_finite


@dataclass(frozen=True)
class AttentionMask:
    """Boolean [query_len x key_len] matrix; True marks an allowed key."""

    allow: np.ndarray

    def __post_init__(self):
        allow = np.asarray(self.allow, dtype=bool)
        object.__setattr__(self, "allow", allow)
        if allow.ndim != 2:
            raise MaskError(f"mask must be 2-D, got shape {allow.shape}")
        if not allow.any(axis=1).all():
            raise MaskError("every query row needs at least one allowed key")

    @classmethod
    def causal(cls, length: int) -> "AttentionMask":
        return cls(np.tril(np.ones((length, length), dtype=bool)))

    @classmethod
    def full(cls, query_len: int, key_len: int) -> "AttentionMask":
        return cls(np.ones((query_len, key_len), dtype=bool))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = weight[ids[...], :]. Scatter-add backward."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ConfigError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.data.shape[0]):
        raise ConfigError("embedding id out of range")
    out = Tensor._result(weight.data[ids], (weight,), "embedding")
    if out.requires_grad:
        def backward():
            buf = np.zeros_like(weight.data)
            np.add.at(buf, ids, out.grad)
            weight._accumulate(buf)
        out._backward = backward
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor._result(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm")
    if out.requires_grad:
        def backward():
            g = out.grad
            if bias.requires_grad:
                bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
            if gain.requires_grad:
                gain._accumulate((g * xhat).reshape(-1, g.shape[-1]).sum(axis=0))
            if x.requires_grad:
                dxhat = g * gain.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                x._accumulate(inv * (dxhat - m1 - xhat * m2))
        out._backward = backward
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = Tensor._result(0.5 * x.data * (1.0 + t), (x,), "gelu")
    if out.requires_grad:
        def backward():
            du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
            d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
            x._accumulate(out.grad * d)
        out._backward = backward
    return out


def masked_softmax(scores: Tensor, allow: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to allowed positions.

    Disallowed positions get probability exactly 0; the -inf fill is
    internal so the finite-output invariant holds. ``allow`` must
    broadcast against ``scores`` and leave no query row fully masked.
    """
    allow = np.asarray(allow, dtype=bool)
    try:
        full = np.broadcast_to(allow, scores.data.shape)
    except ValueError:
        raise MaskError(
            f"mask shape {allow.shape} does not broadcast to scores {scores.data.shape}"
        )
    if not full.any(axis=-1).all():
        raise MaskError("every query row needs at least one allowed key")
    masked = np.where(full, scores.data, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - m)
    p = e / e.sum(axis=-1, keepdims=True)
    _ensure_finite(p, "masked_softmax")
    out = Tensor._result(p, (scores,), "masked_softmax")
    if out.requires_grad:
        def backward():
            g = out.grad
            dot = (g * p).sum(axis=-1, keepdims=True)
            scores._accumulate(p * (g - dot))
        out._backward = backward
    return out


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention under a boolean mask.

    q/k/v carry model-dim vectors ([len, dim] or [batch, len, dim]);
    projections live in the caller. ``mask`` is an AttentionMask shared
    across the batch, or a boolean array broadcastable to the per-head
    score shape for per-sample masks.
    """
    allow = mask.allow if isinstance(mask, AttentionMask) else np.asarray(mask, bool)
    squeeze = q.data.ndim == 2
    if squeeze:
        q, k, v = (t.reshape(1, *t.shape) for t in (q, k, v))
    b, lq, d = q.shape
    lk = k.shape[1]
    if d % heads:
        raise ConfigError(f"heads {heads} must divide model dim {d}")
    if allow.shape[-2:] != (lq, lk):
        raise MaskError(f"mask shape {allow.shape} does not match lengths ({lq}, {lk})")
    hd = d // heads

    def split(t, length):
        return t.reshape(b, length, heads, hd).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q, lq), split(k, lk), split(v, lk)
    scores = (qh @ kh.swapaxes(-1, -2)) * (1.0 / np.sqrt(hd))
    if allow.ndim == 3:
        allow = allow[:, None]
    weights = masked_softmax(scores, allow)
    out = (weights @ vh).transpose(0, 2, 1, 3).reshape(b, lq, d)
    return out.reshape(lq, d) if squeeze else out


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_id: int) -> Tensor:
    """Mean negative log-likelihood over positions whose target != ignore_id."""
    targets = np.asarray(targets)
    flat = logits.data.reshape(-1, logits.data.shape[-1])
    tgt = targets.reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise ConfigError(
            f"targets shape {targets.shape} does not match logits {logits.data.shape}"
        )
    keep = tgt != ignore_id
    n = int(keep.sum())
    if n == 0:
        raise MaskError("cross_entropy: all positions ignored")
    if tgt[keep].min() < 0 or tgt[keep].max() >= flat.shape[1]:
        raise ConfigError("cross_entropy target out of vocab range")
    m = flat.max(axis=-1, keepdims=True)
    shifted = flat - m
    lse = np.log(np.exp(shifted).sum(axis=-1)) + m[:, 0]
    rows = np.arange(flat.shape[0])
    nll = lse - flat[rows, tgt.clip(0)]
    loss = nll[keep].sum() / n
    out = Tensor._result(np.asarray(loss, dtype=logits.data.dtype), (logits,), "cross_entropy")
    if out.requires_grad:
        def backward():
            p = np.exp(shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)))
            p[rows[keep], tgt[keep]] -= 1.0
            p[~keep] = 0.0
            logits._accumulate((out.grad * p / n).reshape(logits.data.shape))
        out._backward = backward
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias); weight is [in_dim, out_dim]."""
    out = x @ weight
    return out if bias is None else out + bias
