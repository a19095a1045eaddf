"""SDR metrics, linear CKA and block-wise CKA reports."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import dsp
from .data import AudioCache, MixSpec, features_from_waves, mix_at_snr
from .errors import DataError, ShapeError, UndefinedMetricError
from .model import TAP_NAMES, CruseModel

SDR_CAP = 60.0


def _pair(reference, estimate) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(reference, dtype=np.float64).ravel()
    e = np.asarray(estimate, dtype=np.float64).ravel()
    if s.shape != e.shape:
        raise ShapeError(f"reference has {s.size} samples, estimate {e.size}")
    if not np.any(s):
        raise UndefinedMetricError("SDR is undefined for a silent reference")
    return s, e


def _ratio_db(signal_energy: float, error_energy: float) -> float:
    if error_energy <= 0:
        return SDR_CAP
    return min(SDR_CAP, 10.0 * math.log10(signal_energy / error_energy))


def sdr(reference, estimate) -> float:
    """``10 log10(|s|^2 / |s - s_hat|^2)`` in dB, capped at +60."""
    s, e = _pair(reference, estimate)
    return _ratio_db(float(s @ s), float((s - e) @ (s - e)))


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR: the reference is first scaled by its optimal projection."""
    s, e = _pair(reference, estimate)
    target = (e @ s) / (s @ s) * s
    return _ratio_db(float(target @ target), float((target - e) @ (target - e)))


def delta_sdr(reference, mixture, estimate) -> float:
    return sdr(reference, estimate) - sdr(reference, mixture)


def linear_cka(x, y) -> float:
    """Linear CKA between ``[n, d1]`` and ``[n, d2]`` activations.

    Columns are mean-centred; the value is
    ``|Y^T X|_F^2 / (|X^T X|_F |Y^T Y|_F)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"linear_cka needs [n, d] inputs with equal n, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ShapeError("linear_cka needs at least two samples")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    if x.shape[0] < max(x.shape[1], y.shape[1]):
        # n x n kernel form is cheaper when samples are fewer than features.
        kx, ky = x @ x.T, y @ y.T
        cross = float(np.sum(kx * ky))
        nx, ny = np.linalg.norm(kx), np.linalg.norm(ky)
    else:
        cross = float(np.linalg.norm(y.T @ x) ** 2)
        nx, ny = np.linalg.norm(x.T @ x), np.linalg.norm(y.T @ y)
    if nx == 0 or ny == 0:
        raise UndefinedMetricError("linear CKA is undefined for zero-variance activations")
    return cross / (nx * ny)


@dataclass
class CkaReport:
    matrix: np.ndarray  # rows: blocks of model A, columns: blocks of model B
    clips: int
    names: tuple[str, ...] = TAP_NAMES

    @property
    def mean_diag(self) -> float:
        return float(np.mean(np.diag(self.matrix)))

    @property
    def mean_all(self) -> float:
        return float(np.mean(self.matrix))

    def to_tsv(self) -> str:
        lines = ["block\t" + "\t".join(self.names)]
        for name, row in zip(self.names, self.matrix):
            lines.append(name + "\t" + "\t".join(f"{v:.6f}" for v in row))
        lines.append(f"# mean_diag={self.mean_diag:.6f}\tmean_all={self.mean_all:.6f}\tclips={self.clips}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_tsv(), encoding="utf-8")


def _tap_rows(tap: torch.Tensor) -> np.ndarray:
    # [1, c, t, f] -> [t, c*f]: frames are samples, channel-frequency units are features.
    _, c, t, f = tap.shape
    return tap[0].permute(1, 0, 2).reshape(t, c * f).double().numpy()


@torch.no_grad()
def clip_cka(model_a: CruseModel, model_b: CruseModel, features: torch.Tensor) -> np.ndarray:
    """9x9 CKA matrix for one ``[1, 1, t, n_mels]`` clip."""
    _, taps_a = model_a.eval().forward_with_taps(features)
    _, taps_b = model_b.eval().forward_with_taps(features)
    rows_a = [_tap_rows(v) for v in taps_a.values()]
    rows_b = [_tap_rows(v) for v in taps_b.values()]
    return np.array([[linear_cka(a, b) for b in rows_b] for a in rows_a])


def cka_block_matrix(model_a: CruseModel, model_b: CruseModel, clips: Iterable[torch.Tensor]) -> CkaReport:
    """Average per-clip block CKA matrices over ``clips`` (LMS feature tensors)."""
    total = None
    count = 0
    for feats in clips:
        m = clip_cka(model_a, model_b, feats)
        total = m if total is None else total + m
        count += 1
    if count == 0:
        raise DataError("no clips to evaluate")
    return CkaReport(total / count, count)


def eval_clips(manifest: Sequence[MixSpec], fixed_snr: float | None = None, load=None):
    """Yield ``(spec, mixture, speech)`` for full-length evaluation mixtures.

    With ``fixed_snr`` each stored speech/noise pairing is remixed at that
    SNR instead of its manifest SNR.
    """
    load = load or AudioCache()
    for spec in manifest:
        s, n = load(spec.speech), load(spec.noise)
        length = min(len(s), len(n))
        snr = spec.snr if fixed_snr is None else fixed_snr
        mix, s_seg, _ = mix_at_snr(s[:length], n[:length], snr)
        yield spec, mix, s_seg


def clip_features(manifest: Sequence[MixSpec], fixed_snr: float | None = None, n_mels: int = dsp.N_MELS):
    for _, mix, speech in eval_clips(manifest, fixed_snr):
        yield features_from_waves(mix, speech, n_mels)[0]


@torch.no_grad()
def enhance(model: CruseModel, mixture: np.ndarray) -> np.ndarray:
    feats, noisy, _ = features_from_waves(mixture, mixture, model.cfg.n_mels)
    mask = model.eval()(feats)
    return dsp.apply_mask_and_reconstruct(mask.double(), noisy.to(torch.complex128))[0].numpy()


@dataclass
class EvalRow:
    speech: str
    noise: str
    snr: float
    sdr_in: float
    sdr_out: float
    si_sdr_in: float
    si_sdr_out: float

    @property
    def delta_sdr(self) -> float:
        return self.sdr_out - self.sdr_in

    @property
    def delta_si_sdr(self) -> float:
        return self.si_sdr_out - self.si_sdr_in


EVAL_COLUMNS = ("speech", "noise", "snr", "sdr_in", "sdr_out", "delta_sdr", "si_sdr_in", "si_sdr_out", "delta_si_sdr")


def evaluate(model: CruseModel, manifest: Sequence[MixSpec], fixed_snr: float | None = None) -> list[EvalRow]:
    """SDR and SI-SDR of unprocessed and enhanced mixtures, per clip.

    Metrics are computed on the span the STFT round trip reconstructs
    exactly (first and last half-frame excluded).
    """
    rows = []
    for spec, mix, speech in eval_clips(manifest, fixed_snr):
        est = enhance(model, mix)
        lo, hi = dsp.HOP, len(est) - dsp.HOP
        ref, inp, out = speech[lo:hi], mix[lo:hi], est[lo:hi]
        rows.append(EvalRow(spec.speech, spec.noise, spec.snr if fixed_snr is None else fixed_snr,
                            sdr(ref, inp), sdr(ref, out), si_sdr(ref, inp), si_sdr(ref, out)))
    return rows


def format_eval(rows: Sequence[EvalRow]) -> str:
    lines = ["\t".join(EVAL_COLUMNS)]
    for r in rows:
        vals = [r.speech, r.noise, f"{r.snr:.3f}"] + [
            f"{getattr(r, c):.4f}" for c in EVAL_COLUMNS[3:]
        ]
        lines.append("\t".join(vals))
    if rows:
        lines.append(
            f"# mean_delta_sdr={np.mean([r.delta_sdr for r in rows]):.4f}\t"
            f"mean_delta_si_sdr={np.mean([r.delta_si_sdr for r in rows]):.4f}\tclips={len(rows)}"
        )
    return "\n".join(lines) + "\n"
