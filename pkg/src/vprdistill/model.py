"""Trainable descriptor head: fusion -> multi-level GeM -> regional encoder."""

from __future__ import annotations

import torch
from torch import nn

from .aggregation import REGION_COUNT, MultiLevelGeM, assemble_descriptor
from .encoders import EncoderConfig, RegionalEncoder
from .errors import ValidationError
from .fusion import FusionConfig, MultiLayerFusion
from .seeding import make_generator


class DescriptorModel(nn.Module):
    """Maps stacked backbone token maps to unit-norm global descriptors.

    The encoder variant decides the behaviour: a ``cross_image`` model (the
    teacher) produces batch-dependent descriptors, a ``self_enhanced`` one
    (the student) is batch-invariant.
    """

    def __init__(self, fusion_cfg: FusionConfig, encoder_cfg: EncoderConfig,
                 gem_p: float = 3.0, seed: int | None = None):
        super().__init__()
        if encoder_cfg.dim != fusion_cfg.out_channels:
            raise ValidationError(
                f"encoder dim {encoder_cfg.dim} != fused channels {fusion_cfg.out_channels}")
        gen = make_generator(seed) if seed is not None else None
        self.fusion = MultiLayerFusion(fusion_cfg, gen)
        self.aggregation = MultiLevelGeM()
        self.encoder = RegionalEncoder(encoder_cfg, gen)

    @property
    def variant(self) -> str:
        return self.encoder.cfg.variant

    @property
    def descriptor_dim(self) -> int:
        return REGION_COUNT * self.fusion.cfg.out_channels

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """(B, M*C1, H, W) feature stacks to (B, 14*C2) descriptors."""
        fused = self.fusion(features)
        regional = self.aggregation(fused)
        enhanced = self.encoder(regional)
        return assemble_descriptor(enhanced)
