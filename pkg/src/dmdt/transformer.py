"""Scaled dot-product attention, multi-head attention and post-norm blocks."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .errors import DimensionError
from .nn import Dropout, LayerNorm, Linear, MLP, Module


def attention(q, k, v, key_mask=None):
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes.

    ``key_mask`` (..., n_k) marks real keys with True; masked keys get weight
    exactly zero. Leading axes of the mask broadcast against the score tensor.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} disagree")
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)[..., None, :]
    return ag.scaled_dot_attention(q, k, v, key_mask)


def attention_reference(q, k, v, key_mask=None):
    """Unfused composition of the primitive ops; same contract as ``attention``."""
    d = q.shape[-1]
    scores = ag.scale(ag.matmul(q, k.swapaxes(-1, -2)), 1.0 / np.sqrt(d))
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)[..., None, :]
    return ag.matmul(ag.masked_attention_weights(scores, key_mask), v)


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng, dtype=np.float64):
        if dim % heads:
            raise DimensionError(f"width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng, dtype)
        self.k_proj = Linear(dim, dim, rng, dtype)
        self.v_proj = Linear(dim, dim, rng, dtype)
        self.out_proj = Linear(dim, dim, rng, dtype)

    def _split(self, x):
        *lead, n, c = x.shape
        return x.reshape(*lead, n, self.heads, c // self.heads).swapaxes(-2, -3)

    def _merge(self, x):
        *lead, h, n, d = x.shape
        return x.swapaxes(-2, -3).reshape(*lead, n, h * d)

    def forward(self, q, k, v, key_mask=None):
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        if key_mask is not None:
            key_mask = np.asarray(key_mask, dtype=bool)[..., None, :]
        return self.out_proj(self._merge(attention(qh, kh, vh, key_mask)))


class FeedForward(Module):
    def __init__(self, dim, hidden, rng, dropout=0.0, drop_rng=None, dtype=np.float64):
        self.lin1 = Linear(dim, hidden, rng, dtype)
        self.lin2 = Linear(hidden, dim, rng, dtype)
        self.drop = Dropout(dropout, drop_rng)

    def forward(self, x):
        return self.lin2(self.drop(ag.relu(self.lin1(x))))


class EncoderLayer(Module):
    """Post-norm self-attention block.

    The positional embedding is added to queries and keys only; the residual
    and the values use the un-positioned input::

        h = LN(x + MHA(x + pos, x + pos, x))
        out = LN(h + FFN(h))
    """

    def __init__(self, dim, heads, ffn_dim, rng, dropout=0.0, drop_rng=None, dtype=np.float64):
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, ffn_dim, rng, dropout, drop_rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.drop = Dropout(dropout, drop_rng)

    def forward(self, x, pos=None, key_mask=None):
        if pos is not None and pos.shape[-2:] != x.shape[-2:]:
            raise DimensionError(f"positional embedding {pos.shape} does not match {x.shape}")
        qk = x if pos is None else x + pos
        h = self.norm1(x + self.drop(self.attn(qk, qk, x, key_mask)))
        return self.norm2(h + self.ffn(h))


class CrossLayer(Module):
    """Post-norm cross-attention block: queries attend to a separate memory."""

    def __init__(self, dim, heads, ffn_dim, rng, dropout=0.0, drop_rng=None, dtype=np.float64):
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, ffn_dim, rng, dropout, drop_rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.drop = Dropout(dropout, drop_rng)

    def forward(self, x, x_pos, memory, memory_pos, memory_mask=None):
        q = x + x_pos
        k = memory + memory_pos
        h = self.norm1(x + self.drop(self.attn(q, k, memory, memory_mask)))
        return self.norm2(h + self.ffn(h))


def zero_residual_branches(module):
    """Zero the last linear map of every attention and FFN branch under ``module``.

    Each post-norm block then starts as ``LN(LN(x))``, so a deep stack passes
    its input through unchanged at init and the branches grow from zero.
    """
    for m in module.modules():
        if isinstance(m, (EncoderLayer, CrossLayer)):
            m.attn.out_proj.weight.data[:] = 0.0
            m.ffn.lin2.weight.data[:] = 0.0
    return module


__all__ = ["zero_residual_branches", "attention", "MultiHeadAttention", "FeedForward", "EncoderLayer", "CrossLayer", "MLP"]
