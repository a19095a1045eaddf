"""Distillation and supervised objectives.

Self-similarity Gram matrices compare batch items at four granularities::

    full  [b, b]        one matrix over the flattened c*t*f activation
    t     [t, b, b]     one per frame, over c*f
    f     [f, b, b]     one per frequency bin, over c*t
    tf    [t, f, b, b]  one per (frame, bin), over channels only

Because channels are contracted away, teacher and student may have different
widths as long as their (t, f) extents agree.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .dsp import expand_mask
from .errors import ConfigurationError, ShapeError

GRAM_KINDS = ("full", "t", "f", "tf")
FLOW_KINDS = ("t", "tf")
KD_KINDS = ("output", "full", "t", "f", "tf", "flow_t", "flow_tf")


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.5
    kd_kind: str = "tf"
    normalize: bool = True
    row_normalize: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.kd_kind not in KD_KINDS:
            raise ConfigurationError(f"kd_kind must be one of {KD_KINDS}, got {self.kd_kind!r}")


def gram(x: Tensor, kind: str = "tf") -> Tensor:
    """Self-similarity Gram matrices of a ``[b, c, t, f]`` activation."""
    b, c, t, f = x.shape
    if kind == "full":
        flat = x.reshape(b, c * t * f)
        return flat @ flat.T
    if kind == "t":
        per = x.permute(2, 0, 1, 3).reshape(t, b, c * f)
    elif kind == "f":
        per = x.permute(3, 0, 1, 2).reshape(f, b, c * t)
    elif kind == "tf":
        per = x.permute(2, 3, 0, 1)  # [t, f, b, c]
    else:
        raise ConfigurationError(f"unknown Gram kind {kind!r}")
    return per @ per.transpose(-1, -2)


def _slices(g: Tensor) -> int:
    n = 1
    for d in g.shape[:-2]:
        n *= d
    return n


def _row_normalize(g: Tensor) -> Tensor:
    return F.normalize(g, p=2, dim=-1)


def _taps(taps) -> list[Tensor]:
    if isinstance(taps, Mapping):
        return list(taps.values())
    return list(taps)


def _check_pairs(teacher: Sequence[Tensor], student: Sequence[Tensor]) -> None:
    if len(teacher) != len(student):
        raise ShapeError(f"teacher has {len(teacher)} taps, student {len(student)}")
    for i, (a, s) in enumerate(zip(teacher, student)):
        if a.shape[0] != s.shape[0] or a.shape[2:] != s.shape[2:]:
            raise ShapeError(
                f"tap {i}: teacher {tuple(a.shape)} and student {tuple(s.shape)} differ in batch or (t, f)"
            )


def local_kd_loss(teacher_taps, student_taps, kind: str = "tf", normalize: bool = True, row_normalize: bool = False) -> Tensor:
    """Squared Frobenius distance of Gram matrices, summed over taps, over b^2.

    With ``normalize`` each tap's term is also divided by its number of
    ``[b, b]`` slices (1, t, f or t*f), keeping kinds on a common scale.
    """
    teacher, student = _taps(teacher_taps), _taps(student_taps)
    _check_pairs(teacher, student)
    b = student[0].shape[0]
    total = student[0].new_zeros(())
    for a, s in zip(teacher, student):
        ga, gs = gram(a, kind), gram(s, kind)
        if row_normalize:
            ga, gs = _row_normalize(ga), _row_normalize(gs)
        term = ((ga - gs) ** 2).sum()
        if normalize:
            term = term / _slices(gs)
        total = total + term
    return total / b**2


def flow(g_i: Tensor, g_j: Tensor, kind: str = "tf") -> Tensor:
    """Inter-layer flow matrices.

    ``t``: ``[t, b, b]`` inputs, per-frame ``G_i @ G_j^T``.
    ``tf``: ``[t, f_i, b, b]`` and ``[t, f_j, b, b]`` inputs. For every frame
    and batch item the ``[f, b]`` row block of each Gram stack is taken and
    ``A_i @ A_j^T`` gives ``[t, b, f_i, f_j]``.
    """
    if kind == "t":
        if g_i.dim() != 3 or g_i.shape != g_j.shape:
            raise ShapeError(f"flow_t needs equal [t, b, b] inputs, got {tuple(g_i.shape)} and {tuple(g_j.shape)}")
        return g_i @ g_j.transpose(-1, -2)
    if kind == "tf":
        if g_i.dim() != 4 or g_j.dim() != 4:
            raise ShapeError("flow_tf needs [t, f, b, b] inputs")
        if g_i.shape[0] != g_j.shape[0] or g_i.shape[2:] != g_j.shape[2:]:
            raise ShapeError(f"flow_tf: t or b mismatch between {tuple(g_i.shape)} and {tuple(g_j.shape)}")
        a_i = g_i.permute(0, 2, 1, 3)  # [t, b, f_i, b]
        a_j = g_j.permute(0, 2, 1, 3)
        return a_i @ a_j.transpose(-1, -2)
    raise ConfigurationError(f"unknown flow kind {kind!r}")


def flow_kd_loss(teacher_taps, student_taps, kind: str = "tf", normalize: bool = True) -> Tensor:
    """Flow-matrix distance over every tap pair ``i < j`` (36 pairs for 9 taps)."""
    teacher, student = _taps(teacher_taps), _taps(student_taps)
    _check_pairs(teacher, student)
    b = student[0].shape[0]
    gt = [gram(a, kind) for a in teacher]
    gs = [gram(s, kind) for s in student]
    total = student[0].new_zeros(())
    for i, j in itertools.combinations(range(len(gs)), 2):
        ft = flow(gt[i], gt[j], kind)
        fs = flow(gs[i], gs[j], kind)
        term = ((ft - fs) ** 2).sum()
        if normalize:
            term = term / _slices(fs)
        total = total + term
    return total / b**2


def kd_loss(kind: str, teacher_taps, student_taps, teacher_mask=None, student_mask=None, noisy=None,
            normalize: bool = True, row_normalize: bool = False) -> Tensor:
    """Dispatch on ``kind`` (see ``KD_KINDS``)."""
    if kind == "output":
        return response_kd_loss(student_mask, teacher_mask, noisy)
    if kind in GRAM_KINDS:
        return local_kd_loss(teacher_taps, student_taps, kind, normalize, row_normalize)
    if kind in ("flow_t", "flow_tf"):
        return flow_kd_loss(teacher_taps, student_taps, kind[5:], normalize)
    raise ConfigurationError(f"unknown KD kind {kind!r}")


def psa_target(noisy: Tensor, clean: Tensor) -> Tensor:
    """Phase-sensitive target ``|S| cos(theta_S - theta_X)`` clipped to ``[0, |X|]``."""
    mag_x = noisy.abs()
    proj = (clean * noisy.conj()).real
    target = torch.where(mag_x > 0, proj / mag_x.clamp_min(torch.finfo(mag_x.dtype).tiny), torch.zeros_like(mag_x))
    return torch.minimum(target.clamp_min(0.0), mag_x)


def _masked_magnitude(mask: Tensor, noisy: Tensor) -> Tensor:
    if mask.dim() == 4:
        mask = mask[:, 0]
    if mask.shape[:-1] != noisy.shape[:-1]:
        raise ShapeError(f"mask {tuple(mask.shape)} not aligned with spectrogram {tuple(noisy.shape)}")
    return expand_mask(mask) * noisy.abs().to(mask.dtype)


def psa_loss(mask: Tensor, noisy: Tensor, clean: Tensor) -> Tensor:
    """Mean squared error between the masked noisy magnitude and the PSA target."""
    if noisy.shape != clean.shape:
        raise ShapeError(f"noisy {tuple(noisy.shape)} and clean {tuple(clean.shape)} differ")
    est = _masked_magnitude(mask, noisy)
    target = psa_target(noisy, clean).to(est.dtype)
    return ((est - target) ** 2).mean()


def response_kd_loss(student_mask: Tensor, teacher_mask: Tensor, noisy: Tensor) -> Tensor:
    """PSA-form distance with the teacher's masked magnitude as target."""
    if student_mask.shape != teacher_mask.shape:
        raise ShapeError(f"student mask {tuple(student_mask.shape)} vs teacher {tuple(teacher_mask.shape)}")
    est = _masked_magnitude(student_mask, noisy)
    target = _masked_magnitude(teacher_mask.to(student_mask.dtype), noisy)
    return ((est - target) ** 2).mean()


def total_loss(weights: LossWeights, kd: Tensor, psa: Tensor) -> Tensor:
    g = weights.gamma
    if g == 0.0:
        return psa
    if g == 1.0:
        return kd
    return g * kd + (1.0 - g) * psa
