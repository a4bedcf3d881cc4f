"""Training step and loop: teacher loss prediction -> adaptive masking ->
student forward -> joint loss -> optimizer step -> EMA.

Determinism: all randomness is driven by numpy Generators derived from the
config seed (model init, mask draws, per-epoch data shuffles).  The mask
generator's state, both model states, and the optimizer moments are stored in
checkpoints, so a resumed run continues the exact uninterrupted stream.
Metrics are serialized without wall-clock timing so identical (config, seed)
runs produce byte-identical files; timings stay on the in-memory records.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import network
from .checkpoint import load_container, save_container
from .config import MaskConfig, ModelConfig, TrainConfig
from .corpus import FrameBatch, Utterance, assemble_batch
from .ema import decay_at, ema_update
from .errors import ContractError, NumericalError
from .losses import (
    LossVector,
    auxiliary_loss,
    build_indicator,
    joint_loss,
    per_frame_reconstruction,
)
from .masking import GeneratorDraws, apply_mask, build_adaptive_mask
from .network import (
    EncoderOutput,
    ModelState,
    build_targets,
    clone_as_teacher,
    decode_reconstruction,
    encode,
    gradient_check,
    init_model,
    load_parameter_arrays,
    parameter_arrays,
    predict_frame_losses,
)

_INIT_STREAM = 0x494E4954
_MASK_STREAM = 0x4D41534B
_DATA_STREAM = 0x44415441


def configure_torch() -> None:
    """Single-threaded CPU math: faster than threaded at this scale and keeps
    reduction order fixed for bitwise-reproducible runs."""
    torch.set_num_threads(1)


@dataclass
class TrainRecord:
    step: int
    epoch: int
    rec_loss: float
    aux_loss: float
    joint_loss: float
    selective_fraction: float
    ema_decay: float
    lr: float
    wall_ms: float = 0.0

    def to_json(self, include_wall: bool = False) -> str:
        payload = {
            "step": self.step,
            "epoch": self.epoch,
            "rec_loss": self.rec_loss,
            "aux_loss": self.aux_loss,
            "joint_loss": self.joint_loss,
            "selective_fraction": self.selective_fraction,
            "ema_decay": self.ema_decay,
            "lr": self.lr,
        }
        if include_wall:
            payload["wall_ms"] = self.wall_ms
        return json.dumps(payload)


@dataclass
class TrackedLosses:
    """Per-frame reconstruction values of the tracked utterance at one step."""

    data_epoch: int
    step: int
    values: np.ndarray
    defined: np.ndarray


@dataclass
class PretrainResult:
    student: ModelState
    teacher: ModelState
    optimizer: torch.optim.Optimizer
    records: list[TrainRecord]
    tracked: list[TrackedLosses] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup 0 -> peak, then cosine decay peak -> 0."""
    if step < 0 or step > cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    peak = cfg.learning_rate
    if step <= cfg.warmup_steps:
        return peak * (step / cfg.warmup_steps) if cfg.warmup_steps > 0 else peak
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def curriculum_epoch(step: int, total_steps: int, epochs: int) -> int:
    """Progress bucket for the mask curriculum: epochs span total_steps."""
    if total_steps <= 0:
        return 0
    return min(epochs - 1, step * epochs // total_steps)


def effective_mask_config(cfg: TrainConfig) -> MaskConfig:
    """Mask config with the curriculum length pinned to the trainer's epochs."""
    return dataclasses.replace(cfg.mask, total_epochs=cfg.epochs)


def make_optimizer(student: ModelState, cfg: TrainConfig) -> torch.optim.AdamW:
    params = [p for p in student.parameters() if p.requires_grad]
    return torch.optim.AdamW(
        params,
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
        foreach=True,
    )


def _emit(hooks, event: str, payload: dict) -> None:
    if hooks is not None:
        hooks(event, payload)


def train_step(
    student: ModelState,
    teacher: ModelState,
    optimizer: torch.optim.Optimizer,
    batch: FrameBatch,
    cfg: TrainConfig,
    epoch: int,
    step: int,
    rng,
    hooks=None,
) -> tuple[TrainRecord, LossVector]:
    """One full update; returns the step record and the actual per-frame losses."""
    wall0 = time.perf_counter()
    mask_cfg = effective_mask_config(cfg)
    k_avg = min(student.cfg.effective_layers_to_average, student.cfg.encoder_layers)

    with torch.no_grad():
        enc_t = encode(teacher, batch)
        pred_t = predict_frame_losses(teacher, enc_t, batch.valid)
        targets = build_targets(enc_t, k_avg, student.cfg.instance_norm_eps)
    _emit(hooks, "teacher_forward", {"step": step, "teacher": teacher})

    maskset = build_adaptive_mask(batch.valid, pred_t.numpy(), mask_cfg, epoch, rng)
    _emit(hooks, "mask_built", {"step": step, "mask": maskset})
    masked = apply_mask(batch, maskset)

    enc_s = encode(student, masked.batch, masked.mask)
    recon = decode_reconstruction(student, enc_s)
    rec_scalar, rec_vec = per_frame_reconstruction(recon, targets, maskset)

    enc_for_pred = enc_s
    if cfg.aux_detach_encoder:
        enc_for_pred = EncoderOutput(
            final=enc_s.final.detach(), per_layer=enc_s.per_layer, valid=enc_s.valid
        )
    pred_s = predict_frame_losses(student, enc_for_pred, batch.valid)
    indicator = build_indicator(rec_vec, maskset)
    aux_scalar, _ = auxiliary_loss(pred_s, indicator, maskset, normalize=cfg.aux_normalize)

    try:
        joint = joint_loss(rec_scalar, aux_scalar, cfg.alpha)
    except NumericalError as exc:
        raise NumericalError(f"step {step}: {exc}") from exc

    lr = lr_at(cfg, step)
    if isinstance(joint, torch.Tensor) and joint.requires_grad:
        optimizer.zero_grad(set_to_none=True)
        joint.backward()
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.step()

    _emit(hooks, "pre_ema", {"step": step, "teacher": teacher})
    lam = decay_at(cfg.ema, step)
    ema_update(teacher, student, lam)
    _emit(hooks, "post_ema", {"step": step, "teacher": teacher})

    record = TrainRecord(
        step=step,
        epoch=epoch,
        rec_loss=float(rec_scalar.detach()) if isinstance(rec_scalar, torch.Tensor) else float(rec_scalar),
        aux_loss=float(aux_scalar.detach()) if isinstance(aux_scalar, torch.Tensor) else float(aux_scalar),
        joint_loss=float(joint.detach()) if isinstance(joint, torch.Tensor) else float(joint),
        selective_fraction=maskset.selective_fraction,
        ema_decay=lam,
        lr=lr,
        wall_ms=(time.perf_counter() - wall0) * 1000.0,
    )
    return record, rec_vec


# ---------------------------------------------------------------------------
# training loop


def _epoch_perm(cache: dict, seed: int, num_utts: int, data_epoch: int) -> np.ndarray:
    if data_epoch not in cache:
        rng = np.random.default_rng([seed, _DATA_STREAM, data_epoch])
        cache[data_epoch] = rng.permutation(num_utts)
    return cache[data_epoch]


def batch_indices(cache: dict, seed: int, num_utts: int, batch_size: int, step: int) -> list[int]:
    """Utterance indices for one step of the shuffled corpus stream."""
    start = step * batch_size
    out = []
    for t in range(start, start + batch_size):
        data_epoch, pos = divmod(t, num_utts)
        out.append(int(_epoch_perm(cache, seed, num_utts, data_epoch)[pos]))
    return out


def _train_arrays(student, teacher, optimizer) -> dict[str, np.ndarray]:
    arrays = {}
    for name, arr in parameter_arrays(student).items():
        arrays[f"student.{name}"] = arr
    for name, arr in parameter_arrays(teacher).items():
        arrays[f"teacher.{name}"] = arr
    params = optimizer.param_groups[0]["params"]
    for i, p in enumerate(params):
        state = optimizer.state.get(p)
        if not state:
            continue
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                arrays[f"opt.{i}.{key}"] = value.detach().cpu().numpy().copy()
    return arrays


def save_train_checkpoint(
    path: str | Path,
    student: ModelState,
    teacher: ModelState,
    optimizer: torch.optim.Optimizer,
    completed_steps: int,
    rng: np.random.Generator,
) -> Path:
    meta = {
        "kind": "train_state",
        "completed_steps": int(completed_steps),
        "rng_state": rng.bit_generator.state,
    }
    save_container(path, _train_arrays(student, teacher, optimizer), meta)
    return Path(path)


def load_train_checkpoint(
    path: str | Path,
    student: ModelState,
    teacher: ModelState,
    optimizer: torch.optim.Optimizer | None = None,
) -> dict:
    arrays, meta = load_container(path)
    student_arrays = {k[len("student."):]: v for k, v in arrays.items() if k.startswith("student.")}
    teacher_arrays = {k[len("teacher."):]: v for k, v in arrays.items() if k.startswith("teacher.")}
    load_parameter_arrays(student, student_arrays)
    load_parameter_arrays(teacher, teacher_arrays)
    if optimizer is not None:
        params = optimizer.param_groups[0]["params"]
        for i, p in enumerate(params):
            entries = {
                k.split(".", 2)[2]: v
                for k, v in arrays.items()
                if k.startswith(f"opt.{i}.")
            }
            if entries:
                optimizer.state[p] = {
                    key: torch.from_numpy(np.ascontiguousarray(v)).clone()
                    for key, v in entries.items()
                }
    return meta


def pretrain(
    utterances: list[Utterance],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    hooks=None,
) -> PretrainResult:
    """Epoch loop with deterministic shuffling; checkpoints and JSONL metrics.

    With ``resume`` the metric stream continues from the checkpointed step and
    is bitwise identical to the uninterrupted run.
    """
    model_cfg.validate()
    cfg.validate()
    if not utterances:
        raise ContractError("pretrain needs a non-empty corpus")
    configure_torch()

    dtype = torch.float32 if cfg.precision == "float32" else torch.float64
    features = [network.extract_features(u, model_cfg.frontend) for u in utterances]
    labels = [u.frame_labels for u in utterances]
    num_utts = len(utterances)

    rng_init = np.random.default_rng([cfg.seed, _INIT_STREAM])
    student = init_model(model_cfg, "student", rng_init, dtype)
    teacher = clone_as_teacher(student)
    optimizer = make_optimizer(student, cfg)
    rng_mask = np.random.default_rng([cfg.seed, _MASK_STREAM])
    draws = GeneratorDraws(rng_mask)

    start_step = 0
    if resume is not None:
        meta = load_train_checkpoint(resume, student, teacher, optimizer)
        rng_mask.bit_generator.state = meta["rng_state"]
        start_step = int(meta["completed_steps"])

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = None
    metrics_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "a" if resume else "w")

    result = PretrainResult(student, teacher, optimizer, records=[])
    perm_cache: dict[int, np.ndarray] = {}
    try:
        for step in range(start_step, cfg.total_steps):
            idxs = batch_indices(perm_cache, cfg.seed, num_utts, cfg.batch_size, step)
            batch = assemble_batch([features[i] for i in idxs], [labels[i] for i in idxs])
            epoch = curriculum_epoch(step, cfg.total_steps, cfg.epochs)
            record, rec_vec = train_step(
                student, teacher, optimizer, batch, cfg, epoch, step, draws, hooks
            )
            result.records.append(record)
            if metrics_fh is not None:
                metrics_fh.write(record.to_json() + "\n")
            if cfg.tracked_utterance is not None and cfg.tracked_utterance in idxs:
                row = idxs.index(cfg.tracked_utterance)
                n_frames = features[cfg.tracked_utterance].shape[0]
                values = rec_vec.numpy()[row, :n_frames].copy()
                defined = rec_vec.defined.numpy()[row, :n_frames].copy()
                position = step * cfg.batch_size + row
                result.tracked.append(
                    TrackedLosses(position // num_utts, step, values, defined)
                )
            if (
                ckpt_dir is not None
                and cfg.checkpoint_every > 0
                and (step + 1) % cfg.checkpoint_every == 0
            ):
                path = ckpt_dir / f"step_{step + 1:06d}.ckpt"
                save_train_checkpoint(path, student, teacher, optimizer, step + 1, rng_mask)
                result.checkpoints.append(path)
                metrics_fh.flush()
        if ckpt_dir is not None:
            path = ckpt_dir / "final.ckpt"
            save_train_checkpoint(path, student, teacher, optimizer, cfg.total_steps, rng_mask)
            result.checkpoints.append(path)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return result


# ---------------------------------------------------------------------------
# gradient checking on the assembled objective


def make_joint_loss_fn(
    student: ModelState,
    teacher: ModelState,
    batch: FrameBatch,
    maskset,
    alpha: float,
    normalize: bool = True,
):
    """Joint loss as a deterministic closure over the student parameters.

    Teacher-derived targets and the ranking indicator are precomputed
    constants, mirroring how a training step treats them.
    """
    k_avg = min(student.cfg.effective_layers_to_average, student.cfg.encoder_layers)
    with torch.no_grad():
        enc_t = encode(teacher, batch)
        targets = build_targets(enc_t, k_avg, student.cfg.instance_norm_eps)
        enc_s0 = encode(student, batch, maskset)
        recon0 = decode_reconstruction(student, enc_s0)
        _, vec0 = per_frame_reconstruction(recon0, targets, maskset)
    indicator = build_indicator(vec0, maskset)

    def loss_fn():
        enc_s = encode(student, batch, maskset)
        recon = decode_reconstruction(student, enc_s)
        rec_scalar, _ = per_frame_reconstruction(recon, targets, maskset)
        pred_s = predict_frame_losses(student, enc_s, batch.valid)
        aux_scalar, _ = auxiliary_loss(pred_s, indicator, maskset, normalize=normalize)
        return joint_loss(rec_scalar, aux_scalar, alpha)

    return loss_fn


def tiny_gradcheck_profile() -> ModelConfig:
    """Smallest joint-loss geometry used for 64-bit gradient verification."""
    from .config import FrontendConfig

    return ModelConfig(
        dim=8,
        encoder_layers=2,
        attention_heads=2,
        ffn_dim=16,
        head_layers=1,
        head_dim=8,
        head_kernel=7,
        layers_to_average=2,
        frontend=FrontendConfig(passthrough=True),
    )


def joint_gradcheck(
    model_cfg: ModelConfig | None = None,
    seed: int = 0,
    eps: float = 1e-3,
    num_coords: int = 60,
    alpha: float = 0.05,
) -> float:
    """Finite-difference check of the full joint loss in 64-bit mode."""
    configure_torch()
    model_cfg = model_cfg if model_cfg is not None else tiny_gradcheck_profile()
    rng = np.random.default_rng([seed, _INIT_STREAM])
    student = init_model(model_cfg, "student", rng, torch.float64)
    teacher = clone_as_teacher(student)

    data_rng = np.random.default_rng([seed, 0xDA7A])
    n = 12
    feats = [
        data_rng.normal(0.0, 1.0, (n, model_cfg.dim)).astype(np.float32),
        data_rng.normal(0.0, 1.0, (n - 3, model_cfg.dim)).astype(np.float32),
    ]
    batch = assemble_batch(feats)

    with torch.no_grad():
        enc_t = encode(teacher, batch)
        pred_t = predict_frame_losses(teacher, enc_t, batch.valid)
    mask_cfg = MaskConfig(mask_prob=0.5, mask_length=2, total_epochs=10)
    maskset = build_adaptive_mask(
        batch.valid, pred_t.numpy(), mask_cfg, epoch=5,
        rng=np.random.default_rng([seed, _MASK_STREAM]),
    )
    loss_fn = make_joint_loss_fn(student, teacher, batch, maskset, alpha)
    params = [p for p in student.parameters() if p.requires_grad]
    return gradient_check(loss_fn, params, eps=eps, num_coords=num_coords,
                          rng=np.random.default_rng([seed, 0xC0]))
