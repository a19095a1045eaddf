"""Loudness measurement, SNR mixing, manifests, batching and a synthetic corpus."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from scipy import signal
from torch import Tensor

from . import dsp
from .errors import DataError, LengthError, ShapeError, UnmixableError

log = logging.getLogger(__name__)

BLOCK_SECONDS = 0.4
STEP_SECONDS = 0.1
ABSOLUTE_GATE = -70.0
RELATIVE_GATE = -10.0


def k_weighting(rate: int = dsp.SAMPLE_RATE) -> list[tuple[np.ndarray, np.ndarray]]:
    """K-weighting biquads (high shelf, then high pass) for ``rate``.

    Coefficients come from the analog prototype, which reproduces the
    published 48 kHz values and extends to other rates.
    """
    f0, gain_db, q = 1681.974450955533, 3.999843853973347, 0.7071752369554196
    k = math.tan(math.pi * f0 / rate)
    vh = 10.0 ** (gain_db / 20.0)
    vb = vh ** 0.4996667741545416
    a0 = 1.0 + k / q + k * k
    shelf_b = np.array([vh + vb * k / q + k * k, 2.0 * (k * k - vh), vh - vb * k / q + k * k]) / a0
    shelf_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0])

    f0, q = 38.13547087602444, 0.5003270373238773
    k = math.tan(math.pi * f0 / rate)
    a0 = 1.0 + k / q + k * k
    # The published high pass has an unnormalised [1, -2, 1] numerator, whose
    # passband gain depends on the rate; keep the 48 kHz gain at every rate.
    k48 = math.tan(math.pi * f0 / 48000.0)
    hp_b = np.array([1.0, -2.0, 1.0]) * (1.0 + k48 / q + k48 * k48) / a0
    hp_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0])
    return [(shelf_b, shelf_a), (hp_b, hp_a)]


def integrated_lufs(wave, rate: int = dsp.SAMPLE_RATE) -> float:
    """Gated integrated loudness of a mono signal in LUFS.

    400 ms blocks with 75 % overlap, absolute gate at -70 LUFS, relative gate
    10 LU below the absolute-gated level. Digital silence returns ``-inf``.
    """
    x = np.asarray(wave, dtype=np.float64)
    block = int(round(BLOCK_SECONDS * rate))
    step = int(round(STEP_SECONDS * rate))
    if x.shape[-1] < block:
        raise LengthError(f"need at least {block} samples for one gating block, got {x.shape[-1]}")
    y = x
    for b, a in k_weighting(rate):
        y = signal.lfilter(b, a, y)
    n_blocks = (len(y) - block) // step + 1
    csum = np.concatenate([[0.0], np.cumsum(y * y)])
    starts = np.arange(n_blocks) * step
    z = (csum[starts + block] - csum[starts]) / block
    with np.errstate(divide="ignore"):
        levels = -0.691 + 10.0 * np.log10(z)
    kept = z[levels > ABSOLUTE_GATE]
    if kept.size == 0:
        return -math.inf
    threshold = -0.691 + 10.0 * math.log10(kept.mean()) + RELATIVE_GATE
    with np.errstate(divide="ignore"):
        kept = kept[-0.691 + 10.0 * np.log10(kept) > threshold]
    return -0.691 + 10.0 * math.log10(kept.mean())


def mix_at_snr(speech, noise, snr: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mix speech and noise so their loudness differs by ``snr`` LU.

    If the mixture would clip, all three outputs are rescaled by the same
    factor so ``mixture == speech + noise`` still holds.

    Returns:
        ``(mixture, scaled_speech, scaled_noise)``.
    """
    s = np.asarray(speech, dtype=np.float64)
    n = np.asarray(noise, dtype=np.float64)
    if s.shape != n.shape:
        raise ShapeError(f"speech {s.shape} and noise {n.shape} differ in length")
    if not math.isfinite(snr):
        raise DataError(f"SNR must be finite, got {snr}")
    ls = integrated_lufs(s)
    ln = integrated_lufs(n)
    if ln == -math.inf:
        raise UnmixableError("noise is silent under loudness gating")
    if ls == -math.inf:
        raise UnmixableError("speech is silent under loudness gating")
    n = n * 10.0 ** ((ls - snr - ln) / 20.0)
    mix = s + n
    peak = np.max(np.abs(mix))
    if peak > 1.0:
        s, n = s / peak, n / peak
        mix = s + n
    return mix, s, n


@dataclass(frozen=True)
class MixSpec:
    speech: str
    noise: str
    snr: float
    seed: int

    def to_line(self) -> str:
        return f"{self.speech}\t{self.noise}\t{self.snr:.6f}\t{self.seed}"

    @classmethod
    def from_line(cls, line: str) -> "MixSpec":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 4:
            raise DataError(f"malformed manifest line: {line!r}")
        return cls(parts[0], parts[1], float(parts[2]), int(parts[3]))


def _wavs(directory) -> list[str]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d} is not a directory")
    files = sorted(str(p) for p in d.glob("*.wav"))
    if not files:
        raise DataError(f"no WAV files in {d}")
    return files


def build_manifest(speech_dir, noise_dir, count: int, snr_range=(-5.0, 15.0), seed: int = 0, path=None) -> list[MixSpec]:
    """Pair random speech and noise files with uniform SNRs.

    The manifest is a tab-separated file, one ``speech noise snr seed``
    record per line; written to ``path`` when given.
    """
    speech, noise = _wavs(speech_dir), _wavs(noise_dir)
    rng = np.random.default_rng(seed)
    lo, hi = snr_range
    specs = []
    for _ in range(count):
        specs.append(MixSpec(
            speech=speech[rng.integers(len(speech))],
            noise=noise[rng.integers(len(noise))],
            snr=round(float(rng.uniform(lo, hi)), 6),
            seed=int(rng.integers(2**31 - 1)),
        ))
    if path is not None:
        write_manifest(path, specs)
    return specs


def write_manifest(path, specs: Sequence[MixSpec]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for spec in specs:
            fh.write(spec.to_line() + "\n")


def read_manifest(path) -> list[MixSpec]:
    try:
        with open(path, encoding="utf-8") as fh:
            specs = [MixSpec.from_line(line) for line in fh if line.strip()]
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not specs:
        raise DataError(f"manifest {path} is empty")
    return specs


class AudioCache:
    """Memoises decoded WAV files; the synthetic corpus fits in memory."""

    def __init__(self):
        self._store: dict[str, np.ndarray] = {}

    def __call__(self, path: str) -> np.ndarray:
        if path not in self._store:
            self._store[path] = dsp.read_wav(path)
        return self._store[path]


@dataclass
class Batch:
    features: Tensor  # [b, 1, t, 80] float32 LMS of the mixture
    noisy: Tensor  # [b, t, 257] complex64
    clean: Tensor  # [b, t, 257] complex64
    mixture: np.ndarray  # [b, samples]
    speech: np.ndarray
    noise: np.ndarray
    specs: list[MixSpec]


def features_from_waves(mixture: np.ndarray, speech: np.ndarray, n_mels: int = dsp.N_MELS):
    noisy = dsp.stft(torch.from_numpy(np.ascontiguousarray(mixture)))
    clean = dsp.stft(torch.from_numpy(np.ascontiguousarray(speech)))
    feats = dsp.lms(noisy, n_mels)
    if feats.dim() == 2:
        feats = feats[None]
    return feats[:, None].float(), noisy.to(torch.complex64), clean.to(torch.complex64)


def next_batch(
    manifest: Sequence[MixSpec],
    cursor: int,
    seed: int,
    batch_size: int = 32,
    clip_seconds: float = 2.0,
    load=None,
    n_mels: int = dsp.N_MELS,
) -> Batch:
    """Draw, crop and mix ``batch_size`` clips; deterministic in ``(seed, cursor)``.

    Specs whose speech or noise is shorter than the clip length are skipped
    with a warning and replaced by another draw.
    """
    if not manifest:
        raise DataError("manifest is empty")
    load = load or AudioCache()
    length = int(round(clip_seconds * dsp.SAMPLE_RATE))
    rng = np.random.default_rng([seed, cursor])
    mixes, speeches, noises, used = [], [], [], []
    attempts = 0
    while len(used) < batch_size:
        attempts += 1
        if attempts > 20 * batch_size:
            raise DataError(f"could not find {batch_size} clips of at least {clip_seconds} s")
        spec = manifest[int(rng.integers(len(manifest)))]
        s, n = load(spec.speech), load(spec.noise)
        if len(s) < length or len(n) < length:
            log.warning("skipping %s / %s: shorter than %.2f s", spec.speech, spec.noise, clip_seconds)
            continue
        crop = np.random.default_rng([spec.seed, seed, cursor, len(used)])
        so = int(crop.integers(len(s) - length + 1))
        no = int(crop.integers(len(n) - length + 1))
        mix, s_seg, n_seg = mix_at_snr(s[so:so + length], n[no:no + length], spec.snr)
        mixes.append(mix)
        speeches.append(s_seg)
        noises.append(n_seg)
        used.append(spec)
    mixture, speech, noise = np.stack(mixes), np.stack(speeches), np.stack(noises)
    feats, noisy, clean = features_from_waves(mixture, speech, n_mels)
    return Batch(feats, noisy, clean, mixture, speech, noise, used)


def batch_stream(
    manifest: Sequence[MixSpec],
    seed: int,
    start: int,
    stop: int,
    workers: int = 0,
    prefetch: int = 2,
    **kwargs,
) -> Iterator[Batch]:
    """Yield ``next_batch`` for cursors ``start..stop-1`` in order.

    With ``workers > 0`` batches are prepared ahead on a thread pool; the
    delivery order is still the cursor order.
    """
    load = kwargs.pop("load", None) or AudioCache()
    if workers <= 0:
        for cursor in range(start, stop):
            yield next_batch(manifest, cursor, seed, load=load, **kwargs)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = []
        cursor = start
        while cursor < stop or pending:
            while cursor < stop and len(pending) < prefetch + workers:
                pending.append(pool.submit(next_batch, manifest, cursor, seed, load=load, **kwargs))
                cursor += 1
            yield pending.pop(0).result()


def synth_speech(rng: np.random.Generator, seconds: float) -> np.ndarray:
    """Speech-like signal: voiced harmonic syllables separated by pauses."""
    n = int(seconds * dsp.SAMPLE_RATE)
    t = np.arange(n) / dsp.SAMPLE_RATE
    out = np.zeros(n)
    pos = 0.0
    while pos < seconds:
        dur = rng.uniform(0.12, 0.35)
        gap = rng.uniform(0.03, 0.2)
        i0, i1 = int(pos * dsp.SAMPLE_RATE), min(n, int((pos + dur) * dsp.SAMPLE_RATE))
        if i1 - i0 > 16:
            seg = t[i0:i1] - t[i0]
            f0 = rng.uniform(90, 240) * (1 + rng.uniform(-0.15, 0.15) * seg / dur)
            phase = 2 * np.pi * np.cumsum(f0) / dsp.SAMPLE_RATE
            formants = rng.uniform([300, 900, 2200], [900, 2200, 3400])
            voiced = np.zeros_like(seg)
            for h in range(1, 40):
                fh = f0 * h
                if fh[0] > 7000:
                    break
                amp = sum(np.exp(-0.5 * ((fh - fm) / 180.0) ** 2) for fm in formants) + 0.02
                voiced += amp * np.sin(h * phase) / h**0.5
            env = np.sin(np.pi * np.arange(i1 - i0) / (i1 - i0)) ** 1.5
            out[i0:i1] += env * voiced * rng.uniform(0.5, 1.0)
        pos += dur + gap
    return 0.3 * out / (np.max(np.abs(out)) + 1e-12)


def synth_noise(rng: np.random.Generator, seconds: float) -> np.ndarray:
    """Stationary or amplitude-modulated coloured noise."""
    n = int(seconds * dsp.SAMPLE_RATE)
    white = rng.standard_normal(n)
    kind = rng.integers(3)
    if kind == 0:
        b, a = signal.butter(2, rng.uniform(500, 4000), fs=dsp.SAMPLE_RATE)
    elif kind == 1:
        lo = rng.uniform(100, 2000)
        b, a = signal.butter(2, [lo, lo * rng.uniform(1.5, 3.0)], btype="band", fs=dsp.SAMPLE_RATE)
    else:
        b, a = signal.butter(1, rng.uniform(1000, 6000), btype="high", fs=dsp.SAMPLE_RATE)
    x = signal.lfilter(b, a, white)
    if rng.random() < 0.5:
        t = np.arange(n) / dsp.SAMPLE_RATE
        x *= 1.0 + 0.6 * np.sin(2 * np.pi * rng.uniform(0.5, 4.0) * t)
    return 0.3 * x / (np.max(np.abs(x)) + 1e-12)


def synth_corpus(out_dir, n_speech: int = 16, n_noise: int = 8, seconds: float = 4.0, seed: int = 0) -> tuple[Path, Path]:
    """Write a synthetic corpus to ``out_dir/speech`` and ``out_dir/noise``."""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    for i in range(n_speech):
        dsp.write_wav(out / "speech" / f"speech_{i:04d}.wav", synth_speech(rng, seconds))
    for i in range(n_noise):
        dsp.write_wav(out / "noise" / f"noise_{i:04d}.wav", synth_noise(rng, seconds))
    return out / "speech", out / "noise"
