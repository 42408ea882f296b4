"""Two-phase training: cross-image teacher, then distilled student.

Phase one trains fusion, GeM and the cross-image encoder with the
multi-similarity loss. Phase two builds a fresh student (self-enhanced
encoder), copies only the fused 1x1 convolution from the teacher and
freezes it, then trains against gamma * ms + eta * mse-to-teacher, with the
teacher run on the full training batch so its outputs carry cross-image
context.

Checkpoints are directories: a key=value metadata file plus one SCVF tensor
file per parameter (and per Adam moment), so identical runs produce
bitwise-identical artifacts. An epoch is one shuffled pass over the
eligible places, P places per batch; epoch e of a run is reproducible in
isolation because its sampling stream is seeded by (seed, phase, e).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch
import yaml

from .errors import FormatError, ValidationError
from .losses import LossWeights, MiningStats, MsLossConfig, distill_loss, ms_loss, total_loss
from .model import DescriptorModel
from .seeding import enable_determinism
from .tensorio import read_tensor_file, write_tensor_file

PHASE_TEACHER = "teacher"
PHASE_STUDENT = "student"
PHASE_VARIANTS = {PHASE_TEACHER: "cross_image", PHASE_STUDENT: "self_enhanced"}
METADATA_FILE = "metadata.txt"
CHECKPOINT_FORMAT = "vprdistill-checkpoint"


@dataclass(frozen=True)
class TrainConfig:
    batch_places: int = 8        # P distinct places per batch
    images_per_place: int = 4    # K images per place; B = P*K
    epochs_teacher: int = 5
    epochs_student: int = 2
    lr0: float = 1e-4
    lr_halving_period: int = 3
    seed: int = 0
    loss: MsLossConfig = field(default_factory=MsLossConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.batch_places < 2:
            raise ValidationError("batch_places must be at least 2 (anchors need negatives)")
        if self.images_per_place < 2:
            raise ValidationError("images_per_place must be at least 2 (anchors need positives)")
        if self.epochs_teacher < 1 or self.epochs_student < 1:
            raise ValidationError("epoch counts must be at least 1")
        if self.lr0 <= 0:
            raise ValidationError("lr0 must be positive")
        if self.lr_halving_period < 1:
            raise ValidationError("lr_halving_period must be at least 1")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: lr0 halved every lr_halving_period epochs."""
    if epoch < 0:
        raise ValidationError(f"epoch must be non-negative, got {epoch}")
    return cfg.lr0 * 0.5 ** (epoch // cfg.lr_halving_period)


@dataclass
class Checkpoint:
    phase: str
    epoch: int                 # completed epochs
    variant: str
    params: dict               # name -> float32 tensor
    config: dict               # flattened run-config snapshot
    history: list              # per-epoch dicts (loss series)
    optimizer: dict | None = None  # {"step": int, "m": {...}, "v": {...}}


def _encode(value) -> str:
    if value is None:
        return "null"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _decode(text: str):
    return yaml.safe_load(text)


def save_checkpoint(directory, ckpt: Checkpoint) -> None:
    os.makedirs(directory, exist_ok=True)
    for stale in os.listdir(directory):
        if stale == METADATA_FILE or stale.endswith(".scvf"):
            os.remove(os.path.join(directory, stale))
    lines = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "phase": ckpt.phase,
        "variant": ckpt.variant,
        "epoch": ckpt.epoch,
    }
    for key, value in ckpt.config.items():
        lines[f"config.{key}"] = _encode(value)
    for name, tensor in ckpt.params.items():
        lines[f"param.{name}.shape"] = "x".join(str(d) for d in tensor.shape)
    for i, entry in enumerate(ckpt.history):
        for key, value in entry.items():
            lines[f"history.{i}.{key}"] = _encode(value)
    if ckpt.optimizer is not None:
        lines["optim.step"] = ckpt.optimizer["step"]
        lines["optim.params"] = ",".join(sorted(ckpt.optimizer["m"]))
    with open(os.path.join(directory, METADATA_FILE), "w") as fh:
        for key in sorted(lines):
            fh.write(f"{key}={lines[key]}\n")
    for name, tensor in ckpt.params.items():
        _write_param(directory, f"{name}.scvf", tensor)
    if ckpt.optimizer is not None:
        for kind in ("m", "v"):
            for name, tensor in ckpt.optimizer[kind].items():
                _write_param(directory, f"optim.{name}.{kind}.scvf", tensor)


def _write_param(directory, filename, tensor):
    flat = tensor.detach().cpu().reshape(-1, 1, 1).numpy()
    write_tensor_file(os.path.join(directory, filename), [(0, flat)])


def _read_param(directory, filename, shape):
    blocks, _ = read_tensor_file(os.path.join(directory, filename))
    if set(blocks) != {0}:
        raise FormatError(f"{filename}: checkpoint tensors must hold exactly one block")
    return torch.from_numpy(blocks[0].reshape(shape))


def load_checkpoint(directory) -> Checkpoint:
    meta_path = os.path.join(directory, METADATA_FILE)
    if not os.path.exists(meta_path):
        raise FormatError(f"{directory} is not a checkpoint (missing {METADATA_FILE})")
    meta = {}
    with open(meta_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{meta_path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            meta[key] = value
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{directory}: not a {CHECKPOINT_FORMAT} directory")
    phase = meta["phase"]
    variant = meta["variant"]
    if PHASE_VARIANTS.get(phase) != variant:
        raise FormatError(f"{directory}: phase {phase!r} inconsistent with variant {variant!r}")
    shapes = {}
    config = {}
    history_raw = {}
    for key, value in meta.items():
        if key.startswith("param.") and key.endswith(".shape"):
            name = key[len("param."):-len(".shape")]
            shapes[name] = tuple(int(d) for d in value.split("x")) if value else ()
        elif key.startswith("config."):
            config[key[len("config."):]] = _decode(value)
        elif key.startswith("history."):
            idx, field_name = key[len("history."):].split(".", 1)
            history_raw.setdefault(int(idx), {})[field_name] = _decode(value)
    moment_names = []
    if "optim.step" in meta:
        listed = meta.get("optim.params", "")
        moment_names = listed.split(",") if listed else []
        for name in moment_names:
            if name not in shapes:
                raise FormatError(f"{directory}: optimizer moments for unknown parameter {name!r}")
    expected_files = {f"{name}.scvf" for name in shapes}
    for name in moment_names:
        expected_files.add(f"optim.{name}.m.scvf")
        expected_files.add(f"optim.{name}.v.scvf")
    on_disk = {f for f in os.listdir(directory) if f.endswith(".scvf")}
    if on_disk != expected_files:
        missing = expected_files - on_disk
        extra = on_disk - expected_files
        raise FormatError(f"{directory}: tensor files inconsistent with metadata "
                          f"(missing {sorted(missing)}, unexpected {sorted(extra)})")
    params = {name: _read_param(directory, f"{name}.scvf", shape)
              for name, shape in sorted(shapes.items())}
    optimizer = None
    if "optim.step" in meta:
        optimizer = {"step": int(meta["optim.step"]), "m": {}, "v": {}}
        for name in moment_names:
            shape = shapes[name]
            optimizer["m"][name] = _read_param(directory, f"optim.{name}.m.scvf", shape)
            optimizer["v"][name] = _read_param(directory, f"optim.{name}.v.scvf", shape)
    history = [history_raw[i] for i in sorted(history_raw)]
    return Checkpoint(phase=phase, epoch=int(meta["epoch"]), variant=variant,
                      params=params, config=config, history=history, optimizer=optimizer)


def _trainable(model) -> list[tuple[str, torch.nn.Parameter]]:
    return [(name, p) for name, p in model.named_parameters() if p.requires_grad]


def _load_model_params(model: DescriptorModel, params: dict) -> None:
    state = dict(model.named_parameters())
    if set(state) != set(params):
        missing = set(state) - set(params)
        extra = set(params) - set(state)
        raise FormatError(f"checkpoint parameters do not match model "
                          f"(missing {sorted(missing)}, unexpected {sorted(extra)})")
    with torch.no_grad():
        for name, tensor in params.items():
            if state[name].shape != tensor.shape:
                raise FormatError(f"parameter {name} has shape {tuple(tensor.shape)}, "
                                  f"model expects {tuple(state[name].shape)}")
            state[name].copy_(tensor)


def _snapshot_params(model) -> dict:
    return {name: p.detach().clone() for name, p in model.named_parameters()}


def _optimizer_snapshot(optimizer, names) -> dict | None:
    if not optimizer.state:
        return None
    step = None
    m, v = {}, {}
    for name, p in zip(names, optimizer.param_groups[0]["params"]):
        state = optimizer.state[p]
        step = int(state["step"])
        m[name] = state["exp_avg"].detach().clone()
        v[name] = state["exp_avg_sq"].detach().clone()
    return {"step": step, "m": m, "v": v}


def _restore_optimizer(optimizer, names, snapshot) -> None:
    sd = optimizer.state_dict()
    sd["state"] = {}
    for i, name in enumerate(names):
        sd["state"][i] = {
            "step": torch.tensor(float(snapshot["step"])),
            "exp_avg": snapshot["m"][name].clone(),
            "exp_avg_sq": snapshot["v"][name].clone(),
        }
    optimizer.load_state_dict(sd)


def _epoch_rng(seed: int, phase: str, epoch: int) -> np.random.Generator:
    phase_id = 0 if phase == PHASE_TEACHER else 1
    return np.random.default_rng([seed, phase_id, epoch])


def train_teacher(run_cfg, dataset, source, resume: Checkpoint | None = None,
                  progress=None) -> Checkpoint:
    """Phase one. Returns the final teacher checkpoint (with Adam state)."""
    from .data import epoch_batches

    tcfg: TrainConfig = run_cfg.train
    if run_cfg.deterministic:
        enable_determinism()
    model = DescriptorModel(run_cfg.fusion_config(),
                            run_cfg.encoder_config(PHASE_VARIANTS[PHASE_TEACHER]),
                            seed=tcfg.seed)
    history: list[dict] = []
    start_epoch = 0
    if resume is not None:
        if resume.phase != PHASE_TEACHER:
            raise ValidationError(f"cannot resume teacher training from a {resume.phase} checkpoint")
        _load_model_params(model, resume.params)
        history = list(resume.history)
        start_epoch = resume.epoch
    if start_epoch >= tcfg.epochs_teacher:
        raise ValidationError(f"checkpoint already has {start_epoch} epochs "
                              f">= epochs_teacher {tcfg.epochs_teacher}")
    names = [name for name, _ in _trainable(model)]
    optimizer = torch.optim.Adam([p for _, p in _trainable(model)], lr=tcfg.lr0)
    if resume is not None and resume.optimizer is not None:
        _restore_optimizer(optimizer, names, resume.optimizer)

    for epoch in range(start_epoch, tcfg.epochs_teacher):
        lr = lr_schedule(epoch, tcfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = _epoch_rng(tcfg.seed, PHASE_TEACHER, epoch)
        losses = []
        mined_frac = []
        for batch in epoch_batches(dataset, tcfg.batch_places, tcfg.images_per_place, rng):
            stats = MiningStats()
            descriptors = model(source.stack(batch.records))
            loss = ms_loss(descriptors, batch.labels, tcfg.loss, stats)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            mined_frac.append(stats.contributing / max(stats.anchors, 1))
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr,
                 "batches": len(losses), "mined_anchor_fraction": float(np.mean(mined_frac))}
        history.append(entry)
        if progress is not None:
            progress(entry)

    return Checkpoint(phase=PHASE_TEACHER, epoch=tcfg.epochs_teacher,
                      variant=PHASE_VARIANTS[PHASE_TEACHER],
                      params=_snapshot_params(model), config=run_cfg.flatten(),
                      history=history, optimizer=_optimizer_snapshot(optimizer, names))


def distill_student(run_cfg, dataset, source, teacher_ckpt: Checkpoint,
                    progress=None) -> Checkpoint:
    """Phase two: train a fresh student against the frozen teacher."""
    import warnings

    from .data import epoch_batches

    tcfg: TrainConfig = run_cfg.train
    if teacher_ckpt.phase != PHASE_TEACHER:
        raise ValidationError("distillation requires a teacher-phase checkpoint")
    if tcfg.weights.gamma == 0 and tcfg.weights.eta == 0:
        raise ValidationError("gamma and eta cannot both be zero")
    if tcfg.weights.eta == 0:
        warnings.warn("eta = 0: distillation term disabled, student trains on ms_loss alone")
    if run_cfg.deterministic:
        enable_determinism()

    teacher = DescriptorModel(run_cfg.fusion_config(),
                              run_cfg.encoder_config(PHASE_VARIANTS[PHASE_TEACHER]),
                              seed=tcfg.seed)
    try:
        _load_model_params(teacher, teacher_ckpt.params)
    except FormatError as exc:
        raise ValidationError(f"teacher checkpoint does not fit this configuration: {exc}") from None
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad = False

    student = DescriptorModel(run_cfg.fusion_config(),
                              run_cfg.encoder_config(PHASE_VARIANTS[PHASE_STUDENT]),
                              seed=tcfg.seed + 1)
    with torch.no_grad():
        student.fusion.conv1x1.weight.copy_(teacher_ckpt.params["fusion.conv1x1.weight"])
        student.fusion.conv1x1.bias.copy_(teacher_ckpt.params["fusion.conv1x1.bias"])
    student.fusion.conv1x1.weight.requires_grad = False
    student.fusion.conv1x1.bias.requires_grad = False

    names = [name for name, _ in _trainable(student)]
    optimizer = torch.optim.Adam([p for _, p in _trainable(student)], lr=tcfg.lr0)
    history: list[dict] = []
    for epoch in range(tcfg.epochs_student):
        lr = lr_schedule(epoch, tcfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = _epoch_rng(tcfg.seed, PHASE_STUDENT, epoch)
        losses, ms_parts, kd_parts = [], [], []
        for batch in epoch_batches(dataset, tcfg.batch_places, tcfg.images_per_place, rng):
            feats = source.stack(batch.records)
            with torch.no_grad():
                x_teacher = teacher(feats)  # full batch: context-bearing targets
            x_student = student(feats)
            if tcfg.weights.gamma > 0:
                ms = ms_loss(x_student, batch.labels, tcfg.loss)
            else:
                ms = x_student.new_zeros(())
            kd = distill_loss(x_student, x_teacher)
            loss = total_loss(ms, kd, tcfg.weights)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            ms_parts.append(float(ms.detach()))
            kd_parts.append(float(kd.detach()))
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr,
                 "ms_loss": float(np.mean(ms_parts)), "distill_loss": float(np.mean(kd_parts)),
                 "batches": len(losses)}
        history.append(entry)
        if progress is not None:
            progress(entry)

    return Checkpoint(phase=PHASE_STUDENT, epoch=tcfg.epochs_student,
                      variant=PHASE_VARIANTS[PHASE_STUDENT],
                      params=_snapshot_params(student), config=run_cfg.flatten(),
                      history=history, optimizer=_optimizer_snapshot(optimizer, names))


def extract_descriptors(model: DescriptorModel, records, source,
                        batch_size: int = 1) -> np.ndarray:
    """Descriptors in record order, processed in manifest-order chunks."""
    if batch_size < 1:
        raise ValidationError("batch_size must be at least 1")
    model.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            rows.append(model(source.stack(chunk)).cpu().numpy())
    if not rows:
        return np.zeros((0, model.descriptor_dim), dtype=np.float32)
    return np.concatenate(rows, axis=0).astype(np.float32)
