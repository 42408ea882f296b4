"""Regional descriptor encoders.

The input is a regional descriptor batch of shape (B, R, C): B images, R
pooled regions, C channels. The same pre-norm transformer stack is applied
under one of two sequence arrangements:

- ``cross_image``: R sequences of length B, one per region slot, so
  attention exchanges information across the images of a batch. The output
  for an image depends on which other images share the batch.
- ``self_enhanced``: B*R sequences of length 1, so every region vector only
  attends to itself and the output is independent of batch composition.

No positional encoding is added; cross-image attention therefore commutes
with any permutation of the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import InputError, ValidationError
from .seeding import init_linear_

CROSS_IMAGE = "cross_image"
SELF_ENHANCED = "self_enhanced"
VARIANTS = (CROSS_IMAGE, SELF_ENHANCED)


@dataclass(frozen=True)
class EncoderConfig:
    dim: int
    heads: int
    layers: int
    variant: str
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.layers < 1:
            raise ValidationError("encoder dim, heads and layers must be positive")
        if self.dim % self.heads != 0:
            raise ValidationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown encoder variant {self.variant!r}")
        if self.mlp_ratio <= 0:
            raise ValidationError("mlp_ratio must be positive")


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, generator=None):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        init_linear_(self.qkv, generator)
        init_linear_(self.proj, generator)

    def forward(self, x, return_weights=False):
        b, s, d = x.shape
        qkv = self.qkv(x).reshape(b, s, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # (b, heads, s, head_dim) each
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, s, d)
        out = self.proj(out)
        if return_weights:
            return out, attn
        return out


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, generator=None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        init_linear_(self.fc1, generator)
        init_linear_(self.fc2, generator)

    def forward(self, x):
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, generator=None):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = MultiHeadSelfAttention(dim, heads, generator)
        self.ln2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = FeedForward(dim, int(dim * mlp_ratio), generator)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


class RegionalEncoder(nn.ModuleList):
    """Transformer stack applied per the configured sequence arrangement."""

    def __init__(self, cfg: EncoderConfig, generator=None):
        blocks = [TransformerBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, generator)
                  for _ in range(cfg.layers)]
        super().__init__(blocks)
        self.cfg = cfg

    def forward(self, x):
        if x.ndim != 3:
            raise InputError(f"expected (B, R, C) input, got shape {tuple(x.shape)}")
        b, r, c = x.shape
        if b == 0:
            raise InputError("empty batch")
        if c != self.cfg.dim:
            raise ValidationError(f"input channels {c} != encoder dim {self.cfg.dim}")
        if self.cfg.variant == CROSS_IMAGE:
            seqs = x.transpose(0, 1)  # (R, B, C): attention runs across images
        else:
            seqs = x.reshape(b * r, 1, c)  # length-1 sequences: no cross-talk
        for block in self:
            seqs = block(seqs)
        if self.cfg.variant == CROSS_IMAGE:
            return seqs.transpose(0, 1)
        return seqs.reshape(b, r, c)
