"""Multi-similarity loss with online hard mining, and the distillation loss.

For unit-normalized descriptors with cosine similarity matrix S, each anchor
q mines informative pairs relative to the margin m:

    keep negative n   iff  S_qn > min over positives of S_qp - m
    keep positive p   iff  S_qp < max over negatives of S_qn + m

(thresholds use all candidates of the opposite set, before mining), then

    L = (1/B) * sum over anchors of
        (1/alpha) * log(1 + sum_p exp(-alpha * (S_qp - lam)))
      + (1/beta)  * log(1 + sum_n exp( beta * (S_qn - lam)))

Anchors whose candidate or mined sets are empty contribute zero; the sum is
still divided by the full batch size B. Note the sign convention: mined
negative similarities enter with +beta, so raising a kept negative raises
the loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import InputError, ShapeError, ValidationError


@dataclass(frozen=True)
class MsLossConfig:
    alpha: float = 1.0
    beta: float = 50.0
    lam: float = 0.0
    margin: float = 0.1

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValidationError("alpha and beta must be positive")
        if self.margin < 0:
            raise ValidationError("margin must be non-negative")


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 1.0
    eta: float = 1.0

    def __post_init__(self):
        if self.gamma < 0 or self.eta < 0:
            raise ValidationError("loss weights must be non-negative")


@dataclass
class MiningStats:
    """Per-batch mining diagnostics."""
    anchors: int = 0
    contributing: int = 0
    skipped_no_candidates: int = 0   # anchor had no positive or no negative in the batch
    skipped_empty_mined: int = 0     # mining removed every positive or every negative
    kept_pairs: list = field(default_factory=list)


def mine_pairs(similarities: torch.Tensor, labels: torch.Tensor, anchor: int,
               margin: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Hard-mined (positive_indices, negative_indices) for one anchor row."""
    if similarities.ndim != 1 or similarities.shape != labels.shape:
        raise ShapeError("similarities and labels must be matching 1-D tensors")
    idx = torch.arange(labels.shape[0])
    pos = idx[(labels == labels[anchor]) & (idx != anchor)]
    neg = idx[labels != labels[anchor]]
    if pos.numel() == 0 or neg.numel() == 0:
        raise ValueError(f"anchor {anchor} lacks positive or negative candidates")
    pos_sims = similarities[pos]
    neg_sims = similarities[neg]
    kept_neg = neg[neg_sims > pos_sims.min() - margin]
    kept_pos = pos[pos_sims < neg_sims.max() + margin]
    return kept_pos, kept_neg


def mine_batch(descriptors: torch.Tensor, labels: torch.Tensor, cfg: MsLossConfig,
               stats: MiningStats | None = None) -> list[tuple[torch.Tensor, torch.Tensor] | None]:
    """Mined index pairs per anchor; None marks a skipped anchor."""
    with torch.no_grad():
        sims = descriptors @ descriptors.t()
        mined: list[tuple[torch.Tensor, torch.Tensor] | None] = []
        for anchor in range(descriptors.shape[0]):
            same = labels == labels[anchor]
            if same.sum() < 2 or same.all():
                mined.append(None)
                if stats is not None:
                    stats.skipped_no_candidates += 1
                continue
            kept_pos, kept_neg = mine_pairs(sims[anchor], labels, anchor, cfg.margin)
            if kept_pos.numel() == 0 or kept_neg.numel() == 0:
                mined.append(None)
                if stats is not None:
                    stats.skipped_empty_mined += 1
                continue
            mined.append((kept_pos, kept_neg))
    return mined


def ms_loss_from_pairs(descriptors: torch.Tensor, mined, cfg: MsLossConfig) -> torch.Tensor:
    """Loss for a fixed mining selection (gradients flow through similarities)."""
    sims = descriptors @ descriptors.t()
    # Graph-attached zero so an all-skipped batch still backprops (grad 0).
    total = descriptors.sum() * 0
    for anchor, pair in enumerate(mined):
        if pair is None:
            continue
        kept_pos, kept_neg = pair
        pos_term = torch.log1p(torch.exp(-cfg.alpha * (sims[anchor, kept_pos] - cfg.lam)).sum()) / cfg.alpha
        neg_term = torch.log1p(torch.exp(cfg.beta * (sims[anchor, kept_neg] - cfg.lam)).sum()) / cfg.beta
        total = total + pos_term + neg_term
    return total / descriptors.shape[0]


def ms_loss(descriptors: torch.Tensor, labels: torch.Tensor, cfg: MsLossConfig,
            stats: MiningStats | None = None) -> torch.Tensor:
    """Multi-similarity loss over a batch of unit-normalized descriptors."""
    if descriptors.ndim != 2:
        raise ShapeError(f"expected (B, D) descriptors, got shape {tuple(descriptors.shape)}")
    if labels.shape != (descriptors.shape[0],):
        raise ShapeError("labels must be a (B,) tensor matching the batch")
    if descriptors.shape[0] < 2:
        raise InputError("ms_loss needs at least two descriptors")
    norms = descriptors.norm(dim=1)
    if not torch.isfinite(descriptors).all():
        raise InputError("descriptors contain non-finite values")
    if (norms - 1.0).abs().max() > 1e-4:
        raise InputError("ms_loss expects unit-normalized descriptor rows")
    if stats is not None:
        stats.anchors = descriptors.shape[0]
    mined = mine_batch(descriptors, labels, cfg, stats)
    if stats is not None:
        stats.contributing = sum(pair is not None for pair in mined)
        stats.kept_pairs = [
            (int(pair[0].numel()), int(pair[1].numel())) if pair is not None else (0, 0)
            for pair in mined]
    return ms_loss_from_pairs(descriptors, mined, cfg)


def distill_loss(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Mean per-image squared L2 distance; the teacher side is detached."""
    if student.shape != teacher.shape:
        raise ShapeError(
            f"student {tuple(student.shape)} and teacher {tuple(teacher.shape)} shapes differ")
    if student.ndim == 1:
        student = student.unsqueeze(0)
        teacher = teacher.unsqueeze(0)
    diff = student - teacher.detach()
    return diff.pow(2).sum(dim=1).mean()


def total_loss(ms: torch.Tensor, kd: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    return weights.gamma * ms + weights.eta * kd
