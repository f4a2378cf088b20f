"""Transformer building blocks shared by the encoder, the MDP module and the decoder.

All blocks are pre-norm with a residual connection around the sublayer.
"""

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    """Raised for inconsistent model or run configuration."""


class ShapeError(ValueError):
    """Raised when tensors violate a shape contract."""


def check_same_shape(*tensors: torch.Tensor) -> None:
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ShapeError(f"shape mismatch: {tuple(first)} vs {tuple(t.shape)}")


def check_finite(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError("non-finite values in input feature map")


def init_linear(layer: nn.Linear) -> None:
    """Variance-scaled uniform init (fan-average), zero bias."""
    nn.init.xavier_uniform_(layer.weight)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)


def multi_head_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Scaled dot-product attention over already-projected q, k, v.

    q is (..., Tq, d), k and v are (..., Tk, d). ``mask`` is a boolean
    (Tq, Tk) tensor where True marks positions that may be attended.
    """
    *lead, tq, d = q.shape
    tk = k.shape[-2]
    hd = d // heads
    q = q.reshape(*lead, tq, heads, hd).transpose(-2, -3)
    k = k.reshape(*lead, tk, heads, hd).transpose(-2, -3)
    v = v.reshape(*lead, tk, heads, hd).transpose(-2, -3)
    scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = scores.softmax(dim=-1)
    out = weights @ v
    return out.transpose(-2, -3).reshape(*lead, tq, d)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if heads < 1 or dim % heads != 0:
            raise ConfigError(f"channels ({dim}) must be divisible by heads ({heads})")
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.o_proj = nn.Linear(dim, dim)
        for layer in (self.q_proj, self.k_proj, self.v_proj, self.o_proj):
            init_linear(layer)

    def forward(self, query, context, mask=None):
        out = multi_head_attention(
            self.q_proj(query), self.k_proj(context), self.v_proj(context), self.heads, mask
        )
        return self.o_proj(out)


class AttentionBlock(nn.Module):
    """``x + Attn(LN(x), LN(context))``; self-attention when context is None."""

    def __init__(self, dim: int, heads: int, cross: bool = False):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim) if cross else None
        self.attn = MultiHeadAttention(dim, heads)

    def forward(self, x, context=None, mask=None):
        q = self.norm_q(x)
        if context is None:
            kv = q
        else:
            kv = self.norm_kv(context) if self.norm_kv is not None else self.norm_q(context)
        return x + self.attn(q, kv, mask)


class FeedForwardBlock(nn.Module):
    """``x + W2 gelu(W1 LN(x))``."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        init_linear(self.fc1)
        init_linear(self.fc2)

    def forward(self, x):
        return x + self.fc2(F.gelu(self.fc1(self.norm(x))))


class TransformerLayer(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.attn = AttentionBlock(dim, heads)
        self.ff = FeedForwardBlock(dim, hidden)

    def forward(self, x, mask=None):
        return self.ff(self.attn(x, mask=mask))
