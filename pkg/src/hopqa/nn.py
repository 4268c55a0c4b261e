"""Transformer building blocks over :mod:`hopqa.autodiff`.

Layers are plain functions reading weights out of a :class:`ParamStore` by
name prefix; ``init_*`` helpers register those weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor


def init_linear(store: ParamStore, prefix: str, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
    scale = 1.0 / np.sqrt(d_in)
    store[f"{prefix}.w"] = Tensor(rng.normal(0.0, scale, (d_in, d_out)).astype(np.float32))
    if bias:
        store[f"{prefix}.b"] = Tensor(np.zeros(d_out, dtype=np.float32))


def linear(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return ad.affine(x, store[f"{prefix}.w"], store.get(f"{prefix}.b"))


def init_layer_norm(store: ParamStore, prefix: str, dim: int):
    store[f"{prefix}.g"] = Tensor(np.ones(dim, dtype=np.float32))
    store[f"{prefix}.b"] = Tensor(np.zeros(dim, dtype=np.float32))


def layer_norm(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, store[f"{prefix}.g"], store[f"{prefix}.b"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    return ad.split_heads(x, heads)


def _merge_heads(x: Tensor) -> Tensor:
    return ad.merge_heads(x)


def multi_head_attention(queries: Tensor, keys: Tensor, values: Tensor, mask, num_heads: int):
    """Scaled dot-product attention over already-projected inputs.

    ``queries`` is ``(..., Lq, D)``, ``keys``/``values`` are ``(..., Lk, D)``.
    ``mask`` is a boolean array broadcastable to ``(..., Lq, Lk)`` that is
    True where a key may be attended; pass None for no masking.

    Returns ``(outputs, scores, weights)`` where ``scores`` are the scaled
    pre-softmax logits of shape ``(..., H, Lq, Lk)``.
    """
    dim = queries.shape[-1]
    if dim % num_heads or keys.shape[-1] != dim or values.shape[-1] != dim:
        raise ad.ShapeError("multi_head_attention", queries.shape, keys.shape, values.shape)
    if keys.shape[-2] != values.shape[-2]:
        raise ad.ShapeError("multi_head_attention", keys.shape, values.shape)
    dh = dim // num_heads
    q = _split_heads(queries, num_heads)
    k = _split_heads(keys, num_heads)
    v = _split_heads(values, num_heads)
    scores = ad.attention_scores(q, k, 1.0 / np.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        # insert the head axis
        mask = np.expand_dims(mask, -3)
    weights = ad.softmax(scores, mask=mask)
    out = _merge_heads(ad.matmul(weights, v))
    return out, scores, weights


@dataclass
class LayerOutput:
    hidden: Tensor
    cross_scores: Tensor | None = None
    cross_weights: Tensor | None = None


def init_attention(store: ParamStore, prefix: str, dim: int, rng):
    for name in ("q", "k", "v", "o"):
        init_linear(store, f"{prefix}.{name}", dim, dim, rng)


def attention_block(store, prefix, x, memory, mask, heads):
    q = linear(store, f"{prefix}.q", x)
    k = linear(store, f"{prefix}.k", memory)
    v = linear(store, f"{prefix}.v", memory)
    out, scores, weights = multi_head_attention(q, k, v, mask, heads)
    return linear(store, f"{prefix}.o", out), scores, weights


def init_ffn(store, prefix, dim, hidden, rng):
    init_linear(store, f"{prefix}.in", dim, hidden, rng)
    init_linear(store, f"{prefix}.out", hidden, dim, rng)


def ffn(store, prefix, x):
    return linear(store, f"{prefix}.out", ad.gelu(linear(store, f"{prefix}.in", x)))


def init_encoder_layer(store, prefix, dim, ffn_dim, rng):
    init_layer_norm(store, f"{prefix}.ln1", dim)
    init_attention(store, f"{prefix}.attn", dim, rng)
    init_layer_norm(store, f"{prefix}.ln2", dim)
    init_ffn(store, f"{prefix}.ffn", dim, ffn_dim, rng)


def encoder_layer(store, prefix, x, key_mask, heads) -> Tensor:
    """Pre-norm bidirectional layer.  ``key_mask``: (..., L) True for real tokens."""
    mask = None
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)[..., None, :]
    h = layer_norm(store, f"{prefix}.ln1", x)
    a, _, _ = attention_block(store, f"{prefix}.attn", h, h, mask, heads)
    x = ad.add(x, a)
    h = layer_norm(store, f"{prefix}.ln2", x)
    return ad.add(x, ffn(store, f"{prefix}.ffn", h))


def init_decoder_layer(store, prefix, dim, ffn_dim, rng):
    init_layer_norm(store, f"{prefix}.ln1", dim)
    init_attention(store, f"{prefix}.self", dim, rng)
    init_layer_norm(store, f"{prefix}.ln2", dim)
    init_attention(store, f"{prefix}.cross", dim, rng)
    init_layer_norm(store, f"{prefix}.ln3", dim)
    init_ffn(store, f"{prefix}.ffn", dim, ffn_dim, rng)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def decoder_layer(store, prefix, x, memory, cross_mask, heads) -> LayerOutput:
    """Causal self-attention, then cross-attention with a per-query memory mask."""
    length = x.shape[-2]
    h = layer_norm(store, f"{prefix}.ln1", x)
    a, _, _ = attention_block(store, f"{prefix}.self", h, h, causal_mask(length), heads)
    x = ad.add(x, a)
    h = layer_norm(store, f"{prefix}.ln2", x)
    c, scores, weights = attention_block(store, f"{prefix}.cross", h, memory, cross_mask, heads)
    x = ad.add(x, c)
    h = layer_norm(store, f"{prefix}.ln3", x)
    x = ad.add(x, ffn(store, f"{prefix}.ffn", h))
    return LayerOutput(x, scores, weights)
