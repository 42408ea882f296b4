"""Multi-layer feature fusion: channel reduction plus token mixing.

Token maps tapped from M backbone layers are concatenated along channels,
reduced by a biased 1x1 convolution with ReLU, flattened to (C2, N) and
passed through G token-mixer layers. Each mixer layer normalizes over the
channel dimension per spatial token, then applies one shared two-layer MLP
across the N token positions of every channel, with a residual connection:

    F[j] = Y[j] + W2 @ relu(W1 @ norm(Y)[j] + b1) + b2     for channel j

The same W1 (N->P) and W2 (P->N) act on every channel, so the mixer is
equivariant to channel permutations (given identical per-channel norm
parameters). There is no channel-mixing MLP.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import TokenMap
from .errors import InputError, ShapeError, ValidationError
from .seeding import fan_in_uniform_


@dataclass(frozen=True)
class FusionConfig:
    channels_per_layer: int   # C1 of each tapped map
    tapped_layers: int        # M
    out_channels: int         # C2
    tokens: int               # N = H*W of the token grid
    mixer_layers: int = 2     # G
    mixer_hidden: int = 256   # P

    def __post_init__(self):
        for name in ("channels_per_layer", "tapped_layers", "out_channels",
                     "tokens", "mixer_layers", "mixer_hidden"):
            if getattr(self, name) < 1:
                raise ValidationError(f"fusion {name} must be positive")

    @property
    def in_channels(self) -> int:
        return self.channels_per_layer * self.tapped_layers


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of a (B, C, N) tensor, per token."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, unbiased=False, keepdim=True)
        norm = (x - mean) / torch.sqrt(var + self.eps)
        return norm * self.gain[:, None] + self.bias[:, None]


class TokenMixer(nn.Module):
    def __init__(self, channels: int, tokens: int, hidden: int, generator=None):
        super().__init__()
        self.ln = ChannelNorm(channels)
        self.w1 = nn.Parameter(torch.empty(hidden, tokens))
        self.b1 = nn.Parameter(torch.empty(hidden))
        self.w2 = nn.Parameter(torch.empty(tokens, hidden))
        self.b2 = nn.Parameter(torch.empty(tokens))
        fan_in_uniform_(self.w1, self.b1, tokens, generator)
        fan_in_uniform_(self.w2, self.b2, hidden, generator)

    def forward(self, y):
        z = self.ln(y)
        h = torch.relu(z @ self.w1.t() + self.b1)   # (B, C, P), mixes over tokens
        return y + h @ self.w2.t() + self.b2


class MultiLayerFusion(nn.Module):
    def __init__(self, cfg: FusionConfig, generator=None):
        super().__init__()
        self.cfg = cfg
        self.conv1x1 = nn.Conv2d(cfg.in_channels, cfg.out_channels, kernel_size=1, bias=True)
        fan_in_uniform_(self.conv1x1.weight, self.conv1x1.bias, cfg.in_channels, generator)
        self.mixer = nn.ModuleList(
            TokenMixer(cfg.out_channels, cfg.tokens, cfg.mixer_hidden, generator)
            for _ in range(cfg.mixer_layers))

    def fuse_channels(self, maps: list[TokenMap]) -> torch.Tensor:
        """Concatenate one image's tapped maps (ascending layer) into (C2, N)."""
        cfg = self.cfg
        if len(maps) != cfg.tapped_layers:
            raise ShapeError(f"expected {cfg.tapped_layers} token maps, got {len(maps)}")
        order = [m.layer_index for m in maps]
        if order != sorted(order) or len(set(order)) != len(order):
            raise ValueError(f"token maps must arrive in ascending layer order, got {order}")
        for m in maps:
            if m.data.shape[0] != cfg.channels_per_layer:
                raise ShapeError(
                    f"layer {m.layer_index} has {m.data.shape[0]} channels, expected {cfg.channels_per_layer}")
        x = torch.cat([m.data for m in maps], dim=0)
        h, w = x.shape[1], x.shape[2]
        if h * w != cfg.tokens:
            raise ShapeError(f"grid {h}x{w} has {h * w} tokens, fusion expects {cfg.tokens}")
        y = torch.relu(self.conv1x1(x.unsqueeze(0)))[0]
        return y.flatten(1)

    def token_mix(self, y: torch.Tensor) -> torch.Tensor:
        """Apply the mixer stack to one (C2, N) map."""
        if y.shape != (self.cfg.out_channels, self.cfg.tokens):
            raise ShapeError(
                f"token_mix expects ({self.cfg.out_channels}, {self.cfg.tokens}), got {tuple(y.shape)}")
        z = y.unsqueeze(0)
        for layer in self.mixer:
            z = layer(z)
        return z[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Fuse a (B, M*C1, H, W) stack into (B, C2, H, W)."""
        if x.ndim != 4:
            raise InputError(f"expected (B, M*C1, H, W), got shape {tuple(x.shape)}")
        b, c, h, w = x.shape
        cfg = self.cfg
        if c != cfg.in_channels:
            raise ShapeError(f"input channels {c} != M*C1 = {cfg.in_channels}")
        if h * w != cfg.tokens:
            raise ShapeError(f"grid {h}x{w} has {h * w} tokens, fusion expects {cfg.tokens}")
        y = torch.relu(self.conv1x1(x)).flatten(2)  # (B, C2, N)
        for layer in self.mixer:
            y = layer(y)
        return y.reshape(b, cfg.out_channels, h, w)


def stack_token_maps(bundles: list[list[TokenMap]]) -> torch.Tensor:
    """Stack per-image TokenMap lists into the (B, M*C1, H, W) fusion input."""
    rows = []
    for maps in bundles:
        order = [m.layer_index for m in maps]
        if order != sorted(order):
            raise ValueError(f"token maps must be in ascending layer order, got {order}")
        rows.append(torch.cat([m.data for m in maps], dim=0))
    return torch.stack(rows, dim=0)
