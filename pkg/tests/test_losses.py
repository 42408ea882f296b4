"""Multi-similarity loss, hard mining, and the distillation objective."""

import math

import pytest
import torch

from fdcheck import max_rel_err
from vprdistill.errors import InputError, ShapeError, ValidationError
from vprdistill.losses import (LossWeights, MiningStats, MsLossConfig,
                               distill_loss, mine_batch, mine_pairs, ms_loss,
                               ms_loss_from_pairs, total_loss)

CFG = MsLossConfig()


def exact_log2_batch():
    """Four unit vectors where every anchor mines one positive and one
    negative, both at similarity zero, so each anchor contributes exactly
    log 2 + (1/50) log 2."""
    root3 = math.sqrt(3.0)
    descriptors = torch.tensor([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, -0.5, root3 / 2],
        [-0.5, root3 / 2, 0.0, 0.0],
    ], dtype=torch.float64)
    labels = torch.tensor([0, 0, 1, 1])
    return descriptors, labels


def test_config_validation():
    with pytest.raises(ValidationError):
        MsLossConfig(alpha=0.0)
    with pytest.raises(ValidationError):
        MsLossConfig(beta=-1.0)
    with pytest.raises(ValidationError):
        MsLossConfig(margin=-0.1)
    with pytest.raises(ValidationError):
        LossWeights(gamma=-1.0)


def test_mine_pairs_rule_example():
    # positives at {0.9, 0.2}, negatives at {0.5, -0.8}, margin 0.1:
    # kept negatives {0.5}, kept positives {0.2}.
    sims = torch.tensor([1.0, 0.9, 0.2, 0.5, -0.8])
    labels = torch.tensor([0, 0, 0, 1, 1])
    kept_pos, kept_neg = mine_pairs(sims, labels, anchor=0, margin=0.1)
    assert kept_pos.tolist() == [2]
    assert kept_neg.tolist() == [3]


def test_mine_pairs_distant_negatives_all_dropped():
    sims = torch.tensor([1.0, 0.9, -0.95])
    labels = torch.tensor([0, 0, 1])
    kept_pos, kept_neg = mine_pairs(sims, labels, anchor=0, margin=0.05)
    assert kept_neg.numel() == 0
    assert kept_pos.numel() == 0  # no negative clears the bar either way


def test_mine_pairs_infinite_margin_keeps_everything():
    sims = torch.tensor([1.0, 0.9, 0.2, 0.5, -0.8])
    labels = torch.tensor([0, 0, 0, 1, 1])
    kept_pos, kept_neg = mine_pairs(sims, labels, anchor=0, margin=float("inf"))
    assert kept_pos.tolist() == [1, 2]
    assert kept_neg.tolist() == [3, 4]


def test_mine_pairs_requires_candidates():
    sims = torch.tensor([1.0, 0.5])
    with pytest.raises(ValueError):
        mine_pairs(sims, torch.tensor([0, 0]), anchor=0, margin=0.1)
    with pytest.raises(ShapeError):
        mine_pairs(sims.reshape(1, 2), torch.tensor([0, 1]), anchor=0, margin=0.1)


def test_mine_batch_skips_and_flags_anchors():
    descriptors = torch.eye(4)
    labels = torch.tensor([0, 1, 2, 2])
    stats = MiningStats()
    mined = mine_batch(descriptors, labels, CFG, stats)
    assert mined[0] is None and mined[1] is None
    assert mined[2] is not None and mined[3] is not None
    assert stats.skipped_no_candidates == 2


def test_ms_loss_exact_closed_form():
    descriptors, labels = exact_log2_batch()
    stats = MiningStats()
    loss = ms_loss(descriptors, labels, CFG, stats)
    expected = math.log(2.0) + math.log(2.0) / 50.0
    assert abs(float(loss) - expected) < 1e-9
    assert stats.anchors == 4
    assert stats.contributing == 4
    assert stats.kept_pairs == [(1, 1)] * 4


def test_ms_loss_formula_on_fixed_selection():
    # One anchor with a positive at S=1 and a negative at S=-1, evaluated on
    # an explicit pair selection (mining would discard so easy a negative).
    descriptors = torch.tensor([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
    mined = [(torch.tensor([1]), torch.tensor([2])), None, None]
    loss = ms_loss_from_pairs(descriptors, mined, CFG)
    per_anchor = math.log1p(math.exp(-1.0)) + math.log1p(math.exp(-50.0)) / 50.0
    assert abs(float(loss) * 3 - per_anchor) < 1e-12
    assert float(loss) > 0


def test_ms_loss_zero_when_nothing_survives():
    descriptors = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    labels = torch.tensor([0, 0, 0])  # no negatives anywhere
    stats = MiningStats()
    assert float(ms_loss(descriptors / descriptors.norm(dim=1, keepdim=True),
                         labels, CFG, stats).detach()) == 0.0
    assert stats.contributing == 0
    assert stats.skipped_no_candidates == 3


def test_ms_loss_all_skipped_batch_still_backprops():
    # Perfectly separated clusters mine nothing; the zero loss must still
    # carry a graph so a training step on such a batch does not crash.
    raw = torch.tensor([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]],
                       requires_grad=True)
    descriptors = raw / raw.norm(dim=1, keepdim=True)
    labels = torch.tensor([0, 0, 1, 1])
    stats = MiningStats()
    loss = ms_loss(descriptors, labels, CFG, stats)
    assert stats.skipped_empty_mined == 4
    loss.backward()
    assert raw.grad is not None
    assert float(raw.grad.abs().max()) == 0.0


def test_ms_loss_monotone_in_mined_similarities():
    # Only anchor 0 contributes, so the loss is a function of S(0, pos) and
    # S(0, neg) alone: up-weighting the positive lowers it, the negative
    # raises it.
    def build(pos_angle, neg_angle):
        return torch.tensor([
            [1.0, 0.0],
            [math.cos(pos_angle), math.sin(pos_angle)],
            [math.cos(neg_angle), math.sin(neg_angle)],
        ], dtype=torch.float64)

    mined = [(torch.tensor([1]), torch.tensor([2])), None, None]
    base = float(ms_loss_from_pairs(build(1.0, 1.2), mined, CFG))
    closer_pos = float(ms_loss_from_pairs(build(0.8, 1.2), mined, CFG))
    closer_neg = float(ms_loss_from_pairs(build(1.0, 1.0), mined, CFG))
    assert closer_pos < base
    assert closer_neg > base


def test_ms_loss_invariant_to_joint_permutation():
    torch.manual_seed(0)
    raw = torch.randn(10, 6, dtype=torch.float64)
    descriptors = raw / raw.norm(dim=1, keepdim=True)
    labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3, 4, 4])
    base = float(ms_loss(descriptors, labels, CFG))
    perm = torch.randperm(10)
    permuted = float(ms_loss(descriptors[perm], labels[perm], CFG))
    assert abs(base - permuted) < 1e-10


def test_ms_loss_input_validation():
    unit = torch.eye(4)
    labels = torch.tensor([0, 0, 1, 1])
    with pytest.raises(InputError):
        ms_loss(unit * 2.0, labels, CFG)
    with pytest.raises(InputError):
        ms_loss(unit[:1], labels[:1], CFG)
    with pytest.raises(ShapeError):
        ms_loss(unit, labels[:2], CFG)
    with pytest.raises(ShapeError):
        ms_loss(unit.flatten(), labels, CFG)
    nan = unit.clone()
    nan[0, 0] = float("nan")
    with pytest.raises(InputError):
        ms_loss(nan, labels, CFG)


def test_distill_loss_examples():
    x = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert float(distill_loss(x, x)) == 0.0
    bumped = x.clone()
    bumped[0, 1] += 1.0
    assert abs(float(distill_loss(bumped, x)) - 0.5) < 1e-7
    single = distill_loss(torch.tensor([[3.0, 4.0]]), torch.zeros(1, 2))
    assert abs(float(single) - 25.0) < 1e-6
    flat = distill_loss(torch.tensor([3.0, 4.0]), torch.zeros(2))
    assert abs(float(flat) - 25.0) < 1e-6


def test_distill_loss_symmetric_value_one_sided_gradient():
    torch.manual_seed(1)
    a = torch.randn(4, 6, requires_grad=True)
    b = torch.randn(4, 6, requires_grad=True)
    forward = distill_loss(a, b).detach()
    backward = distill_loss(b, a).detach()
    assert abs(float(forward) - float(backward)) < 1e-6
    distill_loss(a, b).backward()
    assert a.grad is not None and a.grad.abs().sum() > 0
    assert b.grad is None


def test_distill_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        distill_loss(torch.zeros(2, 3), torch.zeros(3, 2))


def test_total_loss_weighting():
    w = LossWeights()
    assert abs(float(total_loss(torch.tensor(0.3), torch.tensor(0.2), w)) - 0.5) < 1e-7
    zero = total_loss(torch.tensor(0.7), torch.tensor(0.0), LossWeights(gamma=0.0))
    assert float(zero) == 0.0


def test_ms_loss_gradients_match_finite_differences():
    # Six-sample batches; mining is frozen so differences probe the smooth part.
    for seed in range(3):
        torch.manual_seed(20 + seed)
        raw = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
        labels = torch.tensor([0, 0, 1, 1, 2, 2])
        with torch.no_grad():
            unit = raw / raw.norm(dim=1, keepdim=True)
        mined = mine_batch(unit, labels, CFG)
        assert any(pair is not None for pair in mined)

        def fn():
            descriptors = raw / raw.norm(dim=1, keepdim=True)
            return ms_loss_from_pairs(descriptors, mined, CFG)

        assert max_rel_err(fn, [raw]) <= 1e-4


def test_distill_loss_gradients_match_finite_differences():
    for seed in range(3):
        torch.manual_seed(30 + seed)
        student = torch.randn(6, 5, dtype=torch.float64, requires_grad=True)
        teacher = torch.randn(6, 5, dtype=torch.float64)

        def fn():
            return distill_loss(student, teacher)

        assert max_rel_err(fn, [student]) <= 1e-4
