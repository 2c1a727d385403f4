"""Attention, feed-forward and add&norm building blocks.

Tensors are laid out ``(batch, length, width)``. Gradients come from torch
autograd; ``gradients`` wraps it with the name-keyed contract the trainer
and the finite-difference tests use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn
from torch.nn import functional as F

MASK_VALUE = -1e9
LN_EPS = 1e-6
INIT_STD = 0.02


class FullyMaskedRowError(ValueError):
    pass


@dataclass
class AttentionMask:
    """``key_padding`` is True where a key must be ignored, shape (batch, keys)."""

    causal: bool = False
    key_padding: Optional[torch.Tensor] = None


def attention(query, key, value, mask: AttentionMask | None = None, heads: int = 1,
              return_weights: bool = False):
    """Multi-head scaled dot-product attention without projections.

    Forbidden logits receive an additive ``MASK_VALUE`` before the softmax, so
    their weights underflow to exactly zero.
    """
    *lead, n_q, width = query.shape
    n_k = key.shape[-2]
    if key.shape[-1] != width:
        raise ValueError("query width %d != key width %d" % (width, key.shape[-1]))
    if value.shape[-2] != n_k:
        raise ValueError("key and value lengths differ (%d vs %d)" % (n_k, value.shape[-2]))
    if width % heads:
        raise ValueError("width %d is not divisible by %d heads" % (width, heads))
    head_dim = width // heads
    v_head = value.shape[-1] // heads

    def split(t, d):
        return t.reshape(*t.shape[:-1], heads, d).transpose(-3, -2)

    q, k, v = split(query, head_dim), split(key, head_dim), split(value, v_head)
    scores = q @ k.transpose(-1, -2) / math.sqrt(head_dim)

    forbidden = torch.zeros(n_q, n_k, dtype=torch.bool, device=query.device)
    mask = mask or AttentionMask()
    if mask.causal:
        forbidden = torch.ones(n_q, n_k, dtype=torch.bool, device=query.device).triu(1)
    if mask.key_padding is not None:
        # (batch, keys) -> (batch, 1, 1, keys)
        forbidden = forbidden | mask.key_padding[..., None, None, :].to(torch.bool)
    if forbidden.all(-1).any():
        raise FullyMaskedRowError("fully masked row: a query has no visible key")
    scores = scores + forbidden.to(scores.dtype) * MASK_VALUE
    weights = scores.softmax(-1)
    out = (weights @ v).transpose(-3, -2)
    out = out.reshape(*out.shape[:-2], heads * v_head)
    if return_weights:
        return out, weights
    return out


def _init_linear(layer: nn.Linear) -> nn.Linear:
    nn.init.trunc_normal_(layer.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


class MultiHeadAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError("width %d is not divisible by %d heads" % (width, heads))
        self.heads = heads
        self.query = _init_linear(nn.Linear(width, width))
        self.key = _init_linear(nn.Linear(width, width))
        self.value = _init_linear(nn.Linear(width, width))
        self.out = _init_linear(nn.Linear(width, width))

    def forward(self, x, memory=None, mask: AttentionMask | None = None):
        memory = x if memory is None else memory
        h = attention(self.query(x), self.key(memory), self.value(memory), mask, self.heads)
        return self.out(h)


class FeedForward(nn.Module):
    def __init__(self, width: int, hidden_width: int):
        super().__init__()
        self.fc1 = _init_linear(nn.Linear(width, hidden_width))
        self.fc2 = _init_linear(nn.Linear(hidden_width, width))

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class AddNorm(nn.Module):
    """Residual addition followed by layer normalization."""

    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, eps=LN_EPS)

    def forward(self, x, sublayer_out):
        if x.shape != sublayer_out.shape:
            raise ValueError("shape mismatch %s vs %s" % (tuple(x.shape), tuple(sublayer_out.shape)))
        return self.norm(x + sublayer_out)


class TransformerBlock(nn.Module):
    """Post-norm block: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, width: int, heads: int, hidden_width: int, causal: bool = False,
                 cross: bool = False, dropout: float = 0.0):
        super().__init__()
        self.causal = causal
        self.self_attn = MultiHeadAttention(width, heads)
        self.self_norm = AddNorm(width)
        if cross:
            self.cross_attn = MultiHeadAttention(width, heads)
            self.cross_norm = AddNorm(width)
        else:
            self.cross_attn = None
        self.ffn = FeedForward(width, hidden_width)
        self.ffn_norm = AddNorm(width)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, padding=None, memory=None, memory_padding=None):
        mask = AttentionMask(causal=self.causal, key_padding=padding)
        x = self.self_norm(x, self.dropout(self.self_attn(x, mask=mask)))
        if self.cross_attn is not None:
            if memory is None:
                raise ValueError("cross-attention block needs a memory sequence")
            cmask = AttentionMask(key_padding=memory_padding)
            x = self.cross_norm(x, self.dropout(self.cross_attn(x, memory, cmask)))
        return self.ffn_norm(x, self.dropout(self.ffn(x)))


def gradients(loss: torch.Tensor, module: nn.Module) -> dict[str, torch.Tensor]:
    """Gradient of a scalar ``loss`` for every named parameter of ``module``.

    Parameters the loss does not reach get an all-zero gradient.
    """
    if loss.grad_fn is None:
        if loss.requires_grad:
            raise RuntimeError("loss is a leaf; run a forward pass first")
        return {name: torch.zeros_like(p) for name, p in module.named_parameters()}
    named = list(module.named_parameters())
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {name: torch.zeros_like(p) if g is None else g for (name, p), g in zip(named, grads)}
