"""STFT/iSTFT, mel filterbank, LMS features and mask-based reconstruction.

Spectrograms are complex tensors laid out ``[..., frames, bins]``. The DFT
uses orthonormal scaling, so analysis followed by synthesis with the same
square-root Hann window is an identity in the interior of the signal.
"""

from __future__ import annotations

import functools
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile
from torch import Tensor

from .errors import DataError, LengthError, ShapeError

SAMPLE_RATE = 16000
FRAME = 512
HOP = 256
N_BINS = FRAME // 2 + 1
N_MELS = 80
F_MIN = 50.0
F_MAX = 8000.0
COMPRESSION = 0.3


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def sqrt_hann(n: int = FRAME, dtype=torch.float64) -> Tensor:
    """Periodic square-root Hann window."""
    k = torch.arange(n, dtype=torch.float64)
    w = torch.sqrt(0.5 - 0.5 * torch.cos(2 * torch.pi * k / n))
    return w.to(dtype)


def num_frames(length: int) -> int:
    return (length - FRAME) // HOP + 1


def stft(wave) -> Tensor:
    """Complex STFT, 512-sample sqrt-Hann frames at a 256-sample hop, no padding.

    Accepts ``[..., samples]`` arrays or tensors; returns ``[..., t, 257]``.
    """
    x = _as_tensor(wave)
    if not x.is_floating_point():
        x = x.double()
    if x.shape[-1] < FRAME:
        raise LengthError(f"signal has {x.shape[-1]} samples, need at least {FRAME}")
    frames = x.unfold(-1, FRAME, HOP)
    return torch.fft.rfft(frames * sqrt_hann(FRAME, x.dtype), dim=-1, norm="ortho")


def istft(spec: Tensor) -> Tensor:
    """Inverse of :func:`stft` by windowed overlap-add.

    Returns ``[..., (t - 1) * 256 + 512]`` samples. The first and last 256
    samples are only covered by one frame and are not reconstructed exactly.
    """
    spec = _as_tensor(spec)
    if spec.shape[-1] != N_BINS:
        raise ShapeError(f"expected {N_BINS} frequency bins, got {spec.shape[-1]}")
    frames = torch.fft.irfft(spec, n=FRAME, dim=-1, norm="ortho")
    frames = frames * sqrt_hann(FRAME, frames.dtype)
    lead = frames.shape[:-2]
    t = frames.shape[-2]
    length = (t - 1) * HOP + FRAME
    flat = frames.reshape(-1, t, FRAME)
    # FRAME == 2 * HOP: each frame is a head half and a tail half.
    out = flat.new_zeros(flat.shape[0], (t + 1) * HOP)
    out[:, : t * HOP] += flat[:, :, :HOP].reshape(flat.shape[0], -1)
    out[:, HOP:] += flat[:, :, HOP:].reshape(flat.shape[0], -1)
    return out[:, :length].reshape(*lead, length)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=8)
def _mel_matrix(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    edges = _mel_to_hz(np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(N_BINS) * SAMPLE_RATE / FRAME
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    w = np.maximum(0.0, np.minimum(rising, falling))
    w.setflags(write=False)
    return w


def mel_filterbank(n_mels: int = N_MELS, f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    """HTK-mel triangular filterbank ``[n_mels, 257]`` with unit peaks.

    Filters narrower than the bin spacing at the low end may be empty.
    """
    return _mel_matrix(n_mels, float(f_min), float(f_max))


@functools.lru_cache(maxsize=8)
def _expansion_matrix(n_mels: int) -> np.ndarray:
    w = mel_filterbank(n_mels)
    col = w.sum(axis=0)
    covered = col > 1e-9
    e = np.where(covered, w / np.where(covered, col, 1.0), 0.0)
    # Bins no filter touches (below 50 Hz, Nyquist) copy the nearest band's mask.
    centers = np.array([np.argmax(w[m]) if w[m].any() else -1 for m in range(n_mels)])
    filled = np.flatnonzero(centers >= 0)
    for k in np.flatnonzero(~covered):
        m = filled[np.argmin(np.abs(centers[filled] - k))]
        e[:, k] = 0.0
        e[m, k] = 1.0
    e.setflags(write=False)
    return e


def mask_expansion(n_mels: int = N_MELS) -> np.ndarray:
    """``[n_mels, 257]`` matrix whose columns are convex weights over mel bands."""
    return _expansion_matrix(n_mels)


def expand_mask(mask: Tensor) -> Tensor:
    """Map a ``[..., t, n_mels]`` mel mask onto ``[..., t, 257]`` linear bins."""
    e = torch.tensor(mask_expansion(mask.shape[-1]), dtype=mask.dtype, device=mask.device)
    return mask @ e


def lms(spec: Tensor, n_mels: int = N_MELS) -> Tensor:
    """Power-law compressed mel magnitudes.

    ``[..., t, 257]`` complex in, ``[..., t, n_mels]`` real out; callers add
    the channel axis for the model (``x[:, None]``).
    """
    mag = spec.abs()
    w = torch.tensor(mel_filterbank(n_mels), dtype=mag.dtype, device=mag.device)
    return (mag @ w.T).clamp_min(0.0) ** COMPRESSION


def apply_mask(mask: Tensor, noisy: Tensor) -> Tensor:
    """Scale the noisy spectrogram by the expanded mask, keeping its phase.

    ``mask`` is ``[b, 1, t, n_mels]`` (or ``[..., t, n_mels]``); ``noisy``
    ``[b, t, 257]`` complex.
    """
    if mask.dim() == 4:
        mask = mask[:, 0]
    if mask.shape[-2] != noisy.shape[-2]:
        raise ShapeError(f"mask has {mask.shape[-2]} frames, spectrogram has {noisy.shape[-2]}")
    gain = expand_mask(mask.to(noisy.real.dtype))
    return noisy * gain


def apply_mask_and_reconstruct(mask: Tensor, noisy: Tensor) -> Tensor:
    return istft(apply_mask(mask, noisy))


def read_wav(path) -> np.ndarray:
    """Load a mono 16 kHz WAV as float64 in [-1, 1]."""
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise DataError(f"{path}: sample rate {rate}, expected {SAMPLE_RATE}")
    if data.ndim != 1:
        raise DataError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise DataError(f"{path}: unsupported sample format {data.dtype}")


def write_wav(path, samples, pcm16: bool = False) -> None:
    """Write mono 16 kHz audio as 32-bit float (default) or 16-bit PCM."""
    x = np.asarray(samples, dtype=np.float64)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if pcm16:
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = x.astype(np.float32)
    wavfile.write(str(path), SAMPLE_RATE, data)
