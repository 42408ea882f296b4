"""Frozen feature backbone and the on-disk feature archive.

A small ViT stands in for the large frozen foundation model used at full
scale: patch embedding, class token, learned positional table, pre-norm
transformer blocks. ``forward_tokens`` taps intermediate layers, applies the
final layer norm to each tapped layer, drops the class token and rearranges
patch tokens into a (C1, H, W) grid.

The backbone never trains; per-image token maps can also be persisted to a
feature archive (one SCVF file per image id) and read back so later stages
run without a backbone at all.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import torch
from torch import nn

from .encoders import TransformerBlock
from .errors import FormatError, InputError, ValidationError
from .seeding import fan_in_uniform_, make_generator
from .tensorio import read_tensor_file, write_tensor_file


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 56
    patch_size: int = 14
    embed_dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    seed: int = 77

    def __post_init__(self):
        if self.image_size < 1 or self.patch_size < 1:
            raise ValidationError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ValidationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.depth < 1:
            raise ValidationError("depth must be at least 1")
        if self.embed_dim % self.heads != 0:
            raise ValidationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid


@dataclass
class TokenMap:
    """One tapped layer of one image, as a channel-first spatial grid."""
    layer_index: int
    data: torch.Tensor  # (C1, H, W)


class SmallViT(nn.Module):
    """Deterministically initialized, permanently frozen stand-in backbone."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        gen = make_generator(cfg.seed)
        self.patch_embed = nn.Conv2d(3, cfg.embed_dim, cfg.patch_size, stride=cfg.patch_size)
        fan_in_uniform_(self.patch_embed.weight, self.patch_embed.bias,
                        3 * cfg.patch_size * cfg.patch_size, gen)
        self.cls_token = nn.Parameter(torch.empty(1, 1, cfg.embed_dim).normal_(0.0, 0.02, generator=gen))
        self.pos_table = nn.Parameter(
            torch.empty(1, cfg.tokens + 1, cfg.embed_dim).normal_(0.0, 0.02, generator=gen))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, gen) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(cfg.embed_dim, eps=1e-6)
        for param in self.parameters():
            param.requires_grad = False

    def _check_layers(self, layer_indices):
        if not layer_indices:
            raise ValidationError("layer_indices must be non-empty")
        for idx in layer_indices:
            if not 1 <= idx <= self.cfg.depth:
                raise ValidationError(
                    f"layer index {idx} out of range for depth {self.cfg.depth}")

    def _forward_batch(self, images: torch.Tensor, layer_indices) -> dict[int, torch.Tensor]:
        cfg = self.cfg
        if images.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise InputError(
                f"expected (B, 3, {cfg.image_size}, {cfg.image_size}) images, got {tuple(images.shape)}")
        if not torch.isfinite(images).all():
            raise InputError("image contains non-finite values")
        with torch.no_grad():
            patches = self.patch_embed(images).flatten(2).transpose(1, 2)  # (B, N, C1)
            cls = self.cls_token.expand(images.shape[0], -1, -1)
            z = torch.cat([cls, patches], dim=1) + self.pos_table
            wanted = set(layer_indices)
            tapped = {}
            for layer, block in enumerate(self.blocks, start=1):
                z = block(z)
                if layer in wanted:
                    y = self.final_norm(z)[:, 1:, :]  # drop class token
                    tapped[layer] = y.transpose(1, 2).reshape(-1, cfg.embed_dim, cfg.grid, cfg.grid)
        return tapped

    def forward_tokens(self, image: torch.Tensor, layer_indices) -> list[TokenMap]:
        """Token maps for one (3, S, S) image, ascending layer order."""
        self._check_layers(layer_indices)
        if image.ndim != 3:
            raise InputError(f"forward_tokens expects a single (3, S, S) image, got {tuple(image.shape)}")
        tapped = self._forward_batch(image.unsqueeze(0), layer_indices)
        return [TokenMap(idx, tapped[idx][0]) for idx in sorted(set(layer_indices))]

    def forward_grid(self, images: torch.Tensor, layer_indices) -> torch.Tensor:
        """Stacked (B, L, C1, H, W) maps for a (B, 3, S, S) batch."""
        self._check_layers(layer_indices)
        tapped = self._forward_batch(images, layer_indices)
        return torch.stack([tapped[idx] for idx in sorted(set(layer_indices))], dim=1)


def tapped_layer_indices(depth: int, count: int) -> list[int]:
    """The last ``count`` layer indices (1-based), ascending."""
    if count < 1 or count > depth:
        raise ValidationError(f"cannot tap {count} layers of a depth-{depth} backbone")
    return list(range(depth - count + 1, depth + 1))


def archive_file(archive_dir, image_id: str) -> str:
    return os.path.join(archive_dir, f"{image_id}.scvf")


def write_feature_archive(archive_dir, image_id: str, maps: list[TokenMap]) -> None:
    os.makedirs(archive_dir, exist_ok=True)
    blocks = [(m.layer_index, m.data.detach().cpu().numpy()) for m in maps]
    write_tensor_file(archive_file(archive_dir, image_id), blocks)


def load_precomputed(archive_dir, image_id: str, layer_indices,
                     expected_shape=None) -> list[TokenMap]:
    """Read tapped layers for one image id from a feature archive directory."""
    path = archive_file(archive_dir, image_id)
    if not os.path.exists(path):
        raise KeyError(f"image id {image_id!r} not found in archive {archive_dir}")
    blocks, shape = read_tensor_file(path)
    if expected_shape is not None and shape != tuple(expected_shape):
        raise FormatError(
            f"{path}: stored shape {shape} does not match configured {tuple(expected_shape)}")
    out = []
    for idx in sorted(set(layer_indices)):
        if idx not in blocks:
            raise KeyError(f"layer {idx} not stored for image id {image_id!r}")
        out.append(TokenMap(idx, torch.from_numpy(blocks[idx])))
    return out
