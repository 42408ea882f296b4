"""Run-config document handling: round trips, overrides, scalar coercion."""

import pytest

from vprdistill.backbone import BackboneConfig
from vprdistill.config import (EncoderSettings, FusionSettings, RunConfig,
                               apply_overrides, from_dict, from_flat,
                               load_config_file, run_config_from_checkpoint,
                               save_config_file, to_dict)
from vprdistill.errors import FormatError, ValidationError
from vprdistill.training import Checkpoint


def test_defaults_are_consistent():
    cfg = RunConfig()
    assert cfg.tapped_layers() == [3, 4, 5, 6]
    assert cfg.backbone.tokens == 16
    assert cfg.fusion_config().in_channels == 4 * 64
    assert cfg.encoder_config("cross_image").layers == 2
    assert cfg.encoder_config("self_enhanced").layers == 1
    assert cfg.encoder_config("cross_image").dim == cfg.fusion.out_channels
    assert cfg.pca_dim is None


def test_to_dict_spells_lambda():
    doc = to_dict(RunConfig())
    assert "lambda" in doc["train"]["loss"]
    assert "lam" not in doc["train"]["loss"]


def test_dict_round_trip():
    cfg = RunConfig(
        backbone=BackboneConfig(image_size=28, patch_size=7, embed_dim=8,
                                depth=3, heads=2, seed=5),
        fusion=FusionSettings(tapped_layers=2, out_channels=8, mixer_layers=1,
                              mixer_hidden=4),
        teacher_encoder=EncoderSettings(layers=2, heads=2, mlp_ratio=2.0),
        pca_dim=32)
    assert from_dict(to_dict(cfg)) == cfg
    assert from_flat(cfg.flatten()) == cfg


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ValidationError, match="unknown config key"):
        from_dict({"mystery": 1})
    with pytest.raises(ValidationError, match="backbone"):
        from_dict({"backbone": {"wings": 2}})
    with pytest.raises(ValidationError, match="train"):
        from_dict({"train": {"warmup": 5}})
    with pytest.raises(ValidationError, match="must be a mapping"):
        from_dict({"backbone": 7})
    with pytest.raises(ValidationError, match="must be a mapping"):
        from_dict([1, 2])


def test_scalar_coercion_from_yaml_strings():
    cfg = from_dict({"train": {"lr0": "5e-3"}})
    assert cfg.train.lr0 == pytest.approx(5e-3)
    assert isinstance(cfg.train.lr0, float)
    cfg = from_dict({"backbone": {"depth": "8", "image_size": 112}})
    assert cfg.backbone.depth == 8
    cfg = from_dict({"deterministic": "true"})
    assert cfg.deterministic is True
    cfg = from_dict({"pca_dim": "128"})
    assert cfg.pca_dim == 128
    cfg = from_dict({"pca_dim": None})
    assert cfg.pca_dim is None


def test_scalar_coercion_rejects_wrong_types():
    with pytest.raises(ValidationError, match="depth"):
        from_dict({"backbone": {"depth": 3.5}})
    with pytest.raises(ValidationError, match="lr0"):
        from_dict({"train": {"lr0": True}})
    with pytest.raises(ValidationError, match="deterministic"):
        from_dict({"deterministic": "sometimes"})
    with pytest.raises(ValidationError, match="seed"):
        from_dict({"train": {"seed": "seven"}})


def test_apply_overrides():
    cfg = apply_overrides(RunConfig(), {"train.lr0": 5e-3,
                                        "train.loss.lambda": 0.05,
                                        "fusion.out_channels": 32})
    assert cfg.train.lr0 == pytest.approx(5e-3)
    assert cfg.train.loss.lam == pytest.approx(0.05)
    assert cfg.fusion.out_channels == 32
    with pytest.raises(ValidationError, match="unknown config key"):
        apply_overrides(RunConfig(), {"train.momentum": 0.9})
    with pytest.raises(ValidationError, match="unknown config key"):
        apply_overrides(RunConfig(), {"nope.anything": 1})


def test_config_file_round_trip(tmp_path):
    cfg = apply_overrides(RunConfig(), {"train.epochs_teacher": 7, "pca_dim": 16})
    path = tmp_path / "run.yaml"
    save_config_file(path, cfg)
    text = path.read_text()
    assert "lambda:" in text and "lam:" not in text
    assert load_config_file(path) == cfg


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [unclosed\n")
    with pytest.raises(FormatError, match="not valid YAML"):
        load_config_file(bad)
    listy = tmp_path / "list.yaml"
    listy.write_text("- 1\n- 2\n")
    with pytest.raises(ValidationError, match="mapping"):
        load_config_file(listy)
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_config_file(empty) == RunConfig()


def test_cross_field_validation():
    with pytest.raises(ValidationError, match="tap"):
        RunConfig(fusion=FusionSettings(tapped_layers=7))
    with pytest.raises(ValidationError, match="region pyramid"):
        RunConfig(backbone=BackboneConfig(image_size=56, patch_size=28,
                                          embed_dim=8, depth=6, heads=2, seed=0))
    with pytest.raises(ValidationError, match="pca_dim"):
        RunConfig(pca_dim=0)


def test_run_config_from_checkpoint_round_trip():
    cfg = apply_overrides(RunConfig(), {"train.lr0": 5e-3, "train.seed": 1234})
    ckpt = Checkpoint(phase="teacher", epoch=1, variant="cross_image",
                      params={}, config=cfg.flatten(), history=[])
    assert run_config_from_checkpoint(ckpt) == cfg
