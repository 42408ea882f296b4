"""Multi-level GeM pooling over a fixed three-level region pyramid.

The fused (C2, H, W) map is pooled over 14 rectangular regions: the full
map (1), a 2x2 grid (4) and a 3x3 grid (9), with integer boundaries
floor(i*H/k). One learnable scalar exponent p is shared by all regions.
Pooled vectors are concatenated level by level (rows scanned left to right)
and the flattened result is L2-normalized into the global descriptor.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import InputError

LEVELS = (1, 2, 3)
REGION_COUNT = sum(k * k for k in LEVELS)  # 14
GEM_EPS = 1e-6


def partition_regions(h: int, w: int) -> list[tuple[int, int, int, int]]:
    """14 half-open (r0, r1, c0, c1) boxes: full map, 2x2 grid, 3x3 grid."""
    if h < max(LEVELS) or w < max(LEVELS):
        raise ValueError(f"grid {h}x{w} too small to partition into {max(LEVELS)}x{max(LEVELS)} regions")
    boxes = []
    for k in LEVELS:
        rows = [h * i // k for i in range(k + 1)]
        cols = [w * i // k for i in range(k + 1)]
        for i in range(k):
            for j in range(k):
                boxes.append((rows[i], rows[i + 1], cols[j], cols[j + 1]))
    return boxes


def gem_pool(region: torch.Tensor, p, eps: float = GEM_EPS) -> torch.Tensor:
    """Generalized-mean pool over the trailing two (spatial) axes.

    (mean of clamp(x, eps)^p) ** (1/p), computed per channel. p = 1 is the
    arithmetic mean; large p approaches the per-channel maximum.
    """
    if region.ndim < 2 or region.shape[-1] == 0 or region.shape[-2] == 0:
        raise ValueError(f"cannot pool empty region of shape {tuple(region.shape)}")
    p_value = float(p.detach() if isinstance(p, torch.Tensor) else p)
    if p_value <= 0:
        raise InputError(f"GeM exponent must be positive, got {p_value}")
    if not isinstance(p, torch.Tensor):
        p = torch.as_tensor(p, dtype=region.dtype)
    return region.clamp(min=eps).pow(p).mean(dim=(-2, -1)).pow(1.0 / p)


class GeM(nn.Module):
    def __init__(self, p: float = 3.0, eps: float = GEM_EPS):
        super().__init__()
        self.p = nn.Parameter(torch.tensor(float(p)))
        self.eps = eps

    def forward(self, region):
        return gem_pool(region, self.p, self.eps)


class MultiLevelGeM(nn.Module):
    """Pool a (B, C2, H, W) map into a (B, 14, C2) regional descriptor set."""

    def __init__(self, p: float = 3.0):
        super().__init__()
        self.gem = GeM(p)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        if fused.ndim != 4:
            raise InputError(f"expected (B, C2, H, W), got shape {tuple(fused.shape)}")
        boxes = partition_regions(fused.shape[2], fused.shape[3])
        pooled = [self.gem(fused[:, :, r0:r1, c0:c1]) for r0, r1, c0, c1 in boxes]
        return torch.stack(pooled, dim=1)


def assemble_descriptor(regional: torch.Tensor) -> torch.Tensor:
    """Flatten (B, R, C) regional vectors into L2-normalized (B, R*C) descriptors."""
    single = regional.ndim == 2
    if single:
        regional = regional.unsqueeze(0)
    if regional.ndim != 3:
        raise InputError(f"expected (B, R, C) regional set, got shape {tuple(regional.shape)}")
    flat = regional.reshape(regional.shape[0], -1)
    norms = flat.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        raise InputError("cannot normalize an all-zero descriptor")
    out = flat / norms
    return out[0] if single else out
