"""Regional encoders: the two sequence arrangements and their guarantees."""

import numpy as np
import pytest
import torch

from fdcheck import max_rel_err
from vprdistill.encoders import (CROSS_IMAGE, SELF_ENHANCED, EncoderConfig,
                                 MultiHeadSelfAttention, RegionalEncoder,
                                 TransformerBlock)
from vprdistill.errors import InputError, ValidationError
from vprdistill.seeding import make_generator

CROSS = EncoderConfig(dim=8, heads=2, layers=2, variant=CROSS_IMAGE)
SELF = EncoderConfig(dim=8, heads=2, layers=1, variant=SELF_ENHANCED)


def test_config_validation():
    with pytest.raises(ValidationError):
        EncoderConfig(dim=6, heads=4, layers=1, variant=CROSS_IMAGE)
    with pytest.raises(ValidationError):
        EncoderConfig(dim=8, heads=2, layers=0, variant=CROSS_IMAGE)
    with pytest.raises(ValidationError):
        EncoderConfig(dim=8, heads=2, layers=1, variant="batch_norm")
    with pytest.raises(ValidationError):
        EncoderConfig(dim=8, heads=2, layers=1, variant=SELF_ENHANCED, mlp_ratio=0)


def test_single_token_attention_oracle():
    # One token: softmax over a single key is 1, so out = Wp (Wv x + bv) + bp.
    attn = MultiHeadSelfAttention(dim=2, heads=1).double()
    wq = np.array([[0.3, -0.1], [0.2, 0.5]])
    wk = np.array([[1.0, 0.0], [0.0, 1.0]])
    wv = np.array([[0.7, 0.2], [-0.4, 0.9]])
    bq, bk, bv = np.zeros(2), np.zeros(2), np.array([0.1, -0.3])
    wp = np.array([[0.5, 0.5], [1.0, -1.0]])
    bp = np.array([0.05, 0.0])
    with torch.no_grad():
        attn.qkv.weight.copy_(torch.from_numpy(np.vstack([wq, wk, wv])))
        attn.qkv.bias.copy_(torch.from_numpy(np.concatenate([bq, bk, bv])))
        attn.proj.weight.copy_(torch.from_numpy(wp))
        attn.proj.bias.copy_(torch.from_numpy(bp))
    x = np.array([0.6, -1.2])
    out, weights = attn(torch.from_numpy(x).reshape(1, 1, 2), return_weights=True)
    expected = wp @ (wv @ x + bv) + bp
    assert np.allclose(out.detach().numpy().ravel(), expected, atol=1e-12)
    assert np.allclose(weights.detach().numpy(), 1.0)


def test_zeroed_projections_make_block_identity():
    torch.manual_seed(0)
    block = TransformerBlock(dim=8, heads=2)
    with torch.no_grad():
        block.attn.proj.weight.zero_()
        block.attn.proj.bias.zero_()
        block.mlp.fc2.weight.zero_()
        block.mlp.fc2.bias.zero_()
    x = torch.randn(3, 4, 8)
    assert torch.equal(block(x), x)


def test_output_shapes_both_variants():
    torch.manual_seed(1)
    x = torch.randn(5, 14, 8)
    for cfg in (CROSS, SELF):
        out = RegionalEncoder(cfg)(x)
        assert out.shape == (5, 14, 8)


def test_student_is_batch_invariant():
    torch.manual_seed(2)
    enc = RegionalEncoder(SELF)
    x = torch.randn(8, 3, 8)
    full = enc(x)
    singles = torch.cat([enc(x[i:i + 1]) for i in range(8)])
    pairs = torch.cat([enc(x[i:i + 2]) for i in range(0, 8, 2)])
    assert (full - singles).abs().max() < 1e-5
    assert (full - pairs).abs().max() < 1e-5
    perm = torch.randperm(8)
    assert (enc(x[perm]) - full[perm]).abs().max() < 1e-5


def test_student_batch_invariance_tightens_in_float64():
    torch.manual_seed(3)
    enc = RegionalEncoder(SELF).double()
    x = torch.randn(6, 2, 8, dtype=torch.float64)
    full = enc(x)
    singles = torch.cat([enc(x[i:i + 1]) for i in range(6)])
    assert (full - singles).abs().max() < 1e-10


def test_teacher_depends_on_batch_composition():
    torch.manual_seed(4)
    enc = RegionalEncoder(CROSS)
    x = torch.randn(6, 3, 8)
    with_first = enc(x[:4])
    swapped = enc(torch.cat([x[:3], x[5:6]]))
    # image 0 keeps its content but its batchmates changed
    assert (with_first[0] - swapped[0]).abs().max() > 1e-3


def test_teacher_is_permutation_equivariant():
    torch.manual_seed(5)
    enc = RegionalEncoder(CROSS)
    x = torch.randn(7, 4, 8)
    out = enc(x)
    perm = torch.randperm(7)
    assert (enc(x[perm]) - out[perm]).abs().max() < 1e-6


def test_teacher_gives_identical_rows_for_identical_images():
    torch.manual_seed(6)
    enc = RegionalEncoder(CROSS)
    row = torch.randn(1, 5, 8)
    out = enc(row.expand(4, -1, -1))
    assert (out - out[0]).abs().max() < 1e-6


def test_cross_image_with_batch_of_one_equals_self_enhanced():
    gen = make_generator(11)
    cross = RegionalEncoder(EncoderConfig(8, 2, 1, CROSS_IMAGE), gen)
    solo = RegionalEncoder(EncoderConfig(8, 2, 1, SELF_ENHANCED))
    solo.load_state_dict(cross.state_dict())
    x = torch.randn(1, 6, 8)
    assert torch.allclose(cross(x), solo(x), atol=1e-7)


def test_input_validation():
    enc = RegionalEncoder(SELF)
    with pytest.raises(InputError):
        enc(torch.randn(4, 8))
    with pytest.raises(InputError):
        enc(torch.zeros(0, 3, 8))
    with pytest.raises(ValidationError):
        enc(torch.randn(2, 3, 9))


def test_gradients_match_finite_differences():
    for seed, cfg in ((70, EncoderConfig(4, 2, 1, CROSS_IMAGE, mlp_ratio=2.0)),
                      (71, EncoderConfig(4, 2, 1, SELF_ENHANCED, mlp_ratio=2.0))):
        torch.manual_seed(seed)
        enc = RegionalEncoder(cfg).double()
        x = torch.randn(2, 2, 4, dtype=torch.float64, requires_grad=True)
        v = torch.randn(2, 2, 4, dtype=torch.float64)

        def fn():
            return (enc(x) * v).sum()

        assert max_rel_err(fn, [x] + list(enc.parameters())) <= 1e-4
