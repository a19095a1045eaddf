"""Optimisation loop for teacher training and one- or two-step distillation."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import torch
from torch import Tensor

from . import losses
from .data import Batch, MixSpec, batch_stream
from .errors import ConfigurationError, ContractError
from .model import CruseModel, ModelConfig, build_model, checkpoint_bytes, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LOG_COLUMNS = ("phase", "epoch", "step", "psa", "kd", "total")


@dataclass(frozen=True)
class Phase:
    epochs: int
    gamma: float
    kd_kind: str = "tf"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"phase needs at least one epoch, got {self.epochs}")
        losses.LossWeights(self.gamma, self.kd_kind)


@dataclass(frozen=True)
class TrainingSchedule:
    phases: tuple[Phase, ...]
    steps_per_epoch: int = 5000
    batch_size: int = 32
    lr: float = 6e-5
    seed: int = 0
    model_seed: int = 0
    reset_optimizer: bool = False
    grad_clip: float | None = None
    kd_normalize: bool = True
    row_normalize: bool = False
    clip_seconds: float = 2.0
    workers: int = 0

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if not self.phases:
            raise ConfigurationError("schedule needs at least one phase")
        if self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigurationError("steps_per_epoch and batch_size must be positive")
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")

    @property
    def needs_teacher(self) -> bool:
        return any(p.gamma > 0 for p in self.phases)


def two_step(kind: str = "tf", step2_gamma: float = 0.0, **kwargs) -> TrainingSchedule:
    """KD-only pre-training for 100 epochs, then 300 epochs at ``step2_gamma``."""
    return TrainingSchedule((Phase(100, 1.0, kind), Phase(300, step2_gamma, "tf")), **kwargs)


def one_step(kind: str = "tf", **kwargs) -> TrainingSchedule:
    return TrainingSchedule((Phase(400, 0.5, kind),), **kwargs)


def make_optimizer(params: Iterable[Tensor], lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=BETAS, eps=ADAM_EPS)


def adam_step(optimizer: torch.optim.Adam, params: Sequence[Tensor], grads: Sequence[Tensor]) -> None:
    """Apply one bias-corrected Adam update with explicitly supplied gradients."""
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
        p.grad = g.detach().clone()
    optimizer.step()


def _assert_frozen(teacher: CruseModel | None) -> None:
    if teacher is None:
        return
    for name, p in teacher.named_parameters():
        if p.requires_grad or p.grad is not None:
            raise ContractError(f"teacher parameter {name} is not frozen")


def distill_step(
    teacher: CruseModel | None,
    student: CruseModel,
    batch: Batch,
    weights: losses.LossWeights,
    optimizer: torch.optim.Optimizer,
    grad_clip: float | None = None,
) -> dict[str, float]:
    """One optimisation step of the student on ``gamma * KD + (1 - gamma) * PSA``.

    The KD term is still evaluated and reported at ``gamma == 0`` when a
    teacher is available, but contributes no gradient.
    """
    _assert_frozen(teacher)
    if teacher is None and weights.gamma > 0:
        raise ConfigurationError("a teacher is required when gamma > 0")

    student.train()
    optimizer.zero_grad(set_to_none=True)
    mask, taps = student.forward_with_taps(batch.features)

    psa_src = mask if weights.gamma < 1 else mask.detach()
    psa = losses.psa_loss(psa_src, batch.noisy, batch.clean)

    kd = None
    if teacher is not None:
        with torch.no_grad():
            t_mask, t_taps = teacher.forward_with_taps(batch.features)
        if weights.gamma > 0:
            kd = losses.kd_loss(weights.kd_kind, t_taps, taps, t_mask, mask, batch.noisy,
                                weights.normalize, weights.row_normalize)
        else:
            with torch.no_grad():
                kd = losses.kd_loss(weights.kd_kind, t_taps, taps, t_mask, mask, batch.noisy,
                                    weights.normalize, weights.row_normalize)

    total = losses.total_loss(weights, kd if kd is not None else psa.new_zeros(()), psa)
    total.backward()
    _assert_frozen(teacher)
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(student.parameters(), grad_clip)
    optimizer.step()
    return {
        "psa": psa.item(),
        "kd": kd.item() if kd is not None else math.nan,
        "total": total.item(),
    }


@dataclass
class TrainResult:
    student: CruseModel
    records: list[dict] = field(default_factory=list)
    epoch_means: list[dict] = field(default_factory=list)


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.8g}"


def resolve_teacher(teacher) -> CruseModel | None:
    if teacher is None or isinstance(teacher, CruseModel):
        return teacher.freeze() if teacher is not None else None
    return load_checkpoint(teacher).freeze()


def run_schedule(
    schedule: TrainingSchedule,
    student_cfg: ModelConfig,
    manifest: Sequence[MixSpec],
    teacher=None,
    out_dir=None,
    log_file: TextIO | None = None,
    student: CruseModel | None = None,
) -> TrainResult:
    """Run every phase in order, carrying the optimiser state across phases.

    Args:
        schedule: phases and optimisation settings.
        student_cfg: architecture of the model being trained.
        manifest: training mixtures.
        teacher: frozen teacher model or checkpoint path; required if any
            phase has ``gamma > 0``.
        out_dir: if given, checkpoints are written there after every epoch
            (``last.ckpt``), at the end of each phase and at the end.
        log_file: receives one tab-separated record per step.
        student: start from this model instead of a fresh ``build_model``.
    """
    teacher = resolve_teacher(teacher)
    if schedule.needs_teacher and teacher is None:
        raise ConfigurationError("schedule has a KD phase (gamma > 0) but no teacher was given")
    if teacher is not None:
        teacher_sum = hashlib.sha256(checkpoint_bytes(teacher)).hexdigest()

    if student is None:
        student = build_model(student_cfg, schedule.model_seed)
    optimizer = make_optimizer(student.parameters(), schedule.lr)
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult(student)
    if log_file is not None:
        log_file.write("\t".join(LOG_COLUMNS) + "\n")

    total_steps = sum(p.epochs for p in schedule.phases) * schedule.steps_per_epoch
    stream = batch_stream(
        manifest, schedule.seed, 0, total_steps, workers=schedule.workers,
        batch_size=schedule.batch_size, clip_seconds=schedule.clip_seconds, n_mels=student_cfg.n_mels,
    )
    step = 0
    for p_idx, phase in enumerate(schedule.phases, start=1):
        if p_idx > 1 and schedule.reset_optimizer:
            optimizer = make_optimizer(student.parameters(), schedule.lr)
        weights = losses.LossWeights(phase.gamma, phase.kd_kind, schedule.kd_normalize, schedule.row_normalize)
        for epoch in range(1, phase.epochs + 1):
            sums = {"psa": 0.0, "kd": 0.0, "total": 0.0}
            for _ in range(schedule.steps_per_epoch):
                batch = next(stream)
                comps = distill_step(teacher, student, batch, weights, optimizer, schedule.grad_clip)
                step += 1
                if not math.isfinite(comps["total"]):
                    raise ContractError(f"non-finite loss at step {step}")
                for key in sums:
                    sums[key] += comps[key]
                rec = {"phase": p_idx, "epoch": epoch, "step": step, **comps}
                result.records.append(rec)
                if log_file is not None:
                    log_file.write("\t".join(str(rec[c]) if c in ("phase", "epoch", "step") else _fmt(rec[c])
                                             for c in LOG_COLUMNS) + "\n")
            means = {k: v / schedule.steps_per_epoch for k, v in sums.items()}
            result.epoch_means.append({"phase": p_idx, "epoch": epoch, **means})
            log.info("phase %d epoch %d/%d  psa %.5g  kd %.5g  total %.5g",
                     p_idx, epoch, phase.epochs, means["psa"], means["kd"], means["total"])
            if out is not None:
                save_checkpoint(student, out / "last.ckpt")
        if out is not None:
            save_checkpoint(student, out / f"phase{p_idx}.ckpt")
    if out is not None:
        save_checkpoint(student, out / "student.ckpt")
    if log_file is not None:
        log_file.flush()

    if teacher is not None and hashlib.sha256(checkpoint_bytes(teacher)).hexdigest() != teacher_sum:
        raise ContractError("teacher parameters changed during training")
    return result
