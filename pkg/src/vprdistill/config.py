"""Hierarchical run configuration shared by the CLI and the pipeline.

Defaults describe the small reference setup (56x56 images, 64-dim stand-in
backbone); the full-scale values from the original recipe stay expressible
through a config file or flag overrides. A config document is YAML with the
same nesting as RunConfig; unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import yaml

from .backbone import BackboneConfig, tapped_layer_indices
from .encoders import EncoderConfig
from .errors import FormatError, ValidationError
from .fusion import FusionConfig
from .losses import LossWeights, MsLossConfig
from .model import DescriptorModel
from .training import Checkpoint, TrainConfig, _load_model_params


@dataclass(frozen=True)
class FusionSettings:
    tapped_layers: int = 4
    out_channels: int = 64
    mixer_layers: int = 2
    mixer_hidden: int = 16


@dataclass(frozen=True)
class EncoderSettings:
    layers: int = 1
    heads: int = 4
    mlp_ratio: float = 4.0


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionSettings = field(default_factory=FusionSettings)
    teacher_encoder: EncoderSettings = field(default_factory=lambda: EncoderSettings(layers=2))
    student_encoder: EncoderSettings = field(default_factory=lambda: EncoderSettings(layers=1))
    train: TrainConfig = field(default_factory=TrainConfig)
    deterministic: bool = True
    pca_dim: int | None = None

    def __post_init__(self):
        if self.fusion.tapped_layers > self.backbone.depth:
            raise ValidationError(
                f"cannot tap {self.fusion.tapped_layers} layers of a "
                f"depth-{self.backbone.depth} backbone")
        if self.backbone.grid < 3:
            raise ValidationError(
                f"token grid {self.backbone.grid}x{self.backbone.grid} too small for the "
                "1+4+9 region pyramid (need at least 3x3)")
        if self.pca_dim is not None and self.pca_dim < 1:
            raise ValidationError("pca_dim must be positive")
        # Construct the derived configs so inconsistencies surface here.
        self.fusion_config()
        self.encoder_config("cross_image")
        self.encoder_config("self_enhanced")

    def tapped_layers(self) -> list[int]:
        return tapped_layer_indices(self.backbone.depth, self.fusion.tapped_layers)

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            channels_per_layer=self.backbone.embed_dim,
            tapped_layers=self.fusion.tapped_layers,
            out_channels=self.fusion.out_channels,
            tokens=self.backbone.tokens,
            mixer_layers=self.fusion.mixer_layers,
            mixer_hidden=self.fusion.mixer_hidden)

    def encoder_config(self, variant: str) -> EncoderConfig:
        settings = self.teacher_encoder if variant == "cross_image" else self.student_encoder
        return EncoderConfig(dim=self.fusion.out_channels, heads=settings.heads,
                             layers=settings.layers, variant=variant,
                             mlp_ratio=settings.mlp_ratio)

    def flatten(self) -> dict:
        flat = {}

        def walk(prefix, value):
            if isinstance(value, dict):
                for key, sub in value.items():
                    walk(f"{prefix}.{key}" if prefix else key, sub)
            else:
                flat[prefix] = value

        walk("", to_dict(self))
        return flat


_SECTION_TYPES = {
    "backbone": BackboneConfig,
    "fusion": FusionSettings,
    "teacher_encoder": EncoderSettings,
    "student_encoder": EncoderSettings,
}
_TRAIN_SUBSECTIONS = {"loss": MsLossConfig, "weights": LossWeights}


def to_dict(cfg: RunConfig) -> dict:
    doc = asdict(cfg)
    loss = doc["train"]["loss"]
    loss["lambda"] = loss.pop("lam")
    return doc


def _coerce_scalar(annotation: str, value, where: str):
    # YAML 1.1 reads dot-less exponents ("5e-3") as strings, so values
    # arriving from --set or checkpoint metadata may need conversion.
    if value is None and "None" in annotation:
        return None
    base = annotation.split("|")[0].strip()
    try:
        if base == "int":
            if isinstance(value, bool) or not isinstance(value, (int, str)):
                raise ValueError
            return int(value)
        if base == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float, str)):
                raise ValueError
            return float(value)
        if base == "bool":
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            raise ValueError
    except ValueError:
        raise ValidationError(
            f"config key {where!r} expects {annotation}, got {value!r}") from None
    return value


_SCALAR_ANNOTATIONS = {"int", "float", "bool", "int | None", "float | None"}


def _coerce_fields(cls, given: dict, where: str) -> dict:
    out = {}
    for key, value in given.items():
        ann = cls.__dataclass_fields__[key].type
        if ann in _SCALAR_ANNOTATIONS:
            value = _coerce_scalar(ann, value, f"{where}.{key}" if where else key)
        out[key] = value
    return out


def _build_section(cls, given, where):
    allowed = set(cls.__dataclass_fields__)
    if not isinstance(given, dict):
        raise ValidationError(f"config section {where!r} must be a mapping")
    unknown = set(given) - allowed
    if unknown:
        raise ValidationError(f"unknown config key(s) under {where!r}: {sorted(unknown)}")
    return cls(**_coerce_fields(cls, given, where))


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ValidationError("config document must be a mapping")
    doc = {key: value for key, value in doc.items()}
    kwargs = {}
    for name, cls in _SECTION_TYPES.items():
        if name in doc:
            kwargs[name] = _build_section(cls, doc.pop(name), name)
    if "train" in doc:
        train = dict(doc.pop("train"))
        sub_kwargs = {}
        for name, cls in _TRAIN_SUBSECTIONS.items():
            if name in train:
                sub = dict(train.pop(name))
                if name == "loss" and "lambda" in sub:
                    sub["lam"] = sub.pop("lambda")
                sub_kwargs[name] = _build_section(cls, sub, f"train.{name}")
        allowed = set(TrainConfig.__dataclass_fields__) - set(_TRAIN_SUBSECTIONS)
        unknown = set(train) - allowed
        if unknown:
            raise ValidationError(f"unknown config key(s) under 'train': {sorted(unknown)}")
        kwargs["train"] = TrainConfig(**_coerce_fields(TrainConfig, train, "train"),
                                      **sub_kwargs)
    for name in ("deterministic", "pca_dim"):
        if name in doc:
            kwargs[name] = _coerce_scalar(RunConfig.__dataclass_fields__[name].type,
                                          doc.pop(name), name)
    if doc:
        raise ValidationError(f"unknown config key(s): {sorted(doc)}")
    return RunConfig(**kwargs)


def load_config_file(path) -> RunConfig:
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise FormatError(f"{path}: not valid YAML ({exc})") from None
    return from_dict(doc or {})


def save_config_file(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=True)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply dotted-key overrides (YAML spelling, e.g. train.loss.lambda)."""
    doc = to_dict(cfg)
    for dotted, value in overrides.items():
        node = doc
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ValidationError(f"unknown config key {dotted!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ValidationError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value
    return from_dict(doc)


def from_flat(flat: dict) -> RunConfig:
    doc: dict = {}
    for dotted, value in flat.items():
        node = doc
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return from_dict(doc)


def run_config_from_checkpoint(ckpt: Checkpoint) -> RunConfig:
    return from_flat(ckpt.config)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[DescriptorModel, RunConfig]:
    """Rebuild the (frozen, eval-mode) model a checkpoint describes."""
    cfg = run_config_from_checkpoint(ckpt)
    model = DescriptorModel(cfg.fusion_config(), cfg.encoder_config(ckpt.variant),
                            seed=cfg.train.seed)
    _load_model_params(model, ckpt.params)
    model.eval()
    for p in model.parameters():
        p.requires_grad = False
    return model, cfg
