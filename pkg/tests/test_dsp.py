import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cruse_kd import dsp
from cruse_kd.errors import DataError, LengthError, ShapeError

SR = dsp.SAMPLE_RATE


def test_frame_count():
    assert dsp.stft(np.zeros(2 * SR)).shape == (124, 257)
    assert dsp.num_frames(2 * SR) == 124


def test_zero_signal():
    assert torch.count_nonzero(dsp.stft(np.zeros(4096))) == 0


def test_too_short():
    with pytest.raises(LengthError):
        dsp.stft(np.zeros(511))


def test_sine_energy_concentrates_near_bin_32():
    n = np.arange(SR)
    x = np.sin(2 * np.pi * 1000 * n / SR)
    win = dsp.sqrt_hann().numpy()
    # Direct DFT of each windowed frame as the oracle.
    k = np.arange(257)[:, None]
    basis = np.exp(-2j * np.pi * k * np.arange(512)[None] / 512) / np.sqrt(512)
    spec = dsp.stft(x).numpy()
    for t in range(0, spec.shape[0], 7):
        frame = x[t * 256: t * 256 + 512] * win
        oracle = basis @ frame
        np.testing.assert_allclose(spec[t], oracle, atol=1e-10)
        energy = np.abs(oracle) ** 2
        energy[1:256] *= 2
        assert energy[32:34].sum() / energy.sum() >= 0.90


def test_windowed_parseval():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(4096)
    spec = dsp.stft(x).numpy()
    win = dsp.sqrt_hann().numpy()
    for t in range(spec.shape[0]):
        power = np.abs(spec[t]) ** 2
        power[1:256] *= 2
        frame = x[t * 256: t * 256 + 512] * win
        assert power.sum() == pytest.approx(np.sum(frame**2), rel=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1024, 6000))
def test_round_trip_interior(seed, length):
    x = np.random.default_rng(seed).uniform(-1, 1, length)
    y = dsp.istft(dsp.stft(x)).numpy()
    assert np.max(np.abs(y[256:-256] - x[256: len(y) - 256])) < 1e-5


def test_istft_zero_and_linearity():
    assert torch.count_nonzero(dsp.istft(torch.zeros(5, 257, dtype=torch.complex128))) == 0
    a = torch.randn(6, 257, dtype=torch.complex128)
    b = torch.randn(6, 257, dtype=torch.complex128)
    torch.testing.assert_close(dsp.istft(a + b), dsp.istft(a) + dsp.istft(b), rtol=1e-6, atol=1e-9)


def test_istft_wrong_bins():
    with pytest.raises(ShapeError):
        dsp.istft(torch.zeros(3, 256, dtype=torch.complex64))


def test_filterbank_shape_and_contiguity():
    w = dsp.mel_filterbank()
    assert w.shape == (80, 257)
    assert (w >= 0).all()
    for row in w:
        nz = np.flatnonzero(row)
        assert nz.size and np.array_equal(nz, np.arange(nz[0], nz[-1] + 1))
    assert w[:, 0].sum() == 0  # DC lies below 50 Hz
    assert w.max() <= 1.0


def test_filterbank_edges_in_band():
    freqs = np.arange(257) * SR / 512
    touched = freqs[dsp.mel_filterbank().sum(axis=0) > 0]
    assert touched.min() >= 50 and touched.max() <= 8000


def test_lms_zero_and_flat():
    assert torch.count_nonzero(dsp.lms(torch.zeros(3, 257, dtype=torch.complex128))) == 0
    flat = torch.ones(2, 257, dtype=torch.complex128)
    expect = dsp.mel_filterbank().sum(axis=1) ** 0.3
    np.testing.assert_allclose(dsp.lms(flat).numpy(), np.broadcast_to(expect, (2, 80)), rtol=1e-12)


def test_lms_nonnegative():
    feats = dsp.lms(dsp.stft(np.random.default_rng(0).standard_normal(3000)))
    assert feats.shape[-1] == 80 and (feats >= 0).all()


def test_expansion_columns_are_convex():
    e = dsp.mask_expansion()
    assert (e >= 0).all()
    np.testing.assert_allclose(e.sum(axis=0), 1.0, atol=1e-12)


def test_expansion_matches_normalised_transpose_where_covered():
    w = dsp.mel_filterbank()
    col = w.sum(axis=0)
    covered = col > 1e-9
    np.testing.assert_allclose(dsp.mask_expansion()[:, covered], w[:, covered] / col[covered], rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_expanded_mask_bounded(seed):
    m = torch.from_numpy(np.random.default_rng(seed).uniform(0.01, 0.99, (3, 80)))
    lin = dsp.expand_mask(m)
    assert (lin >= m.min(dim=-1, keepdim=True).values - 1e-12).all()
    assert (lin <= m.max(dim=-1, keepdim=True).values + 1e-12).all()


def test_identity_and_zero_masks():
    x = np.random.default_rng(2).standard_normal(5000)
    noisy = dsp.stft(x)[None]
    t = noisy.shape[1]
    ref = dsp.istft(noisy)
    out = dsp.apply_mask_and_reconstruct(torch.ones(1, 1, t, 80, dtype=torch.float64), noisy)
    assert torch.max(torch.abs(out - ref)) < 1e-5
    silent = dsp.apply_mask_and_reconstruct(torch.zeros(1, 1, t, 80, dtype=torch.float64), noisy)
    assert torch.linalg.norm(silent) / torch.linalg.norm(ref) < 1e-4


def test_mask_keeps_noisy_phase():
    noisy = dsp.stft(np.random.default_rng(3).standard_normal(3000))[None]
    mask = torch.rand(1, 1, noisy.shape[1], 80, dtype=torch.float64) * 0.9 + 0.05
    est = dsp.apply_mask(mask, noisy)
    torch.testing.assert_close(torch.angle(est), torch.angle(noisy))


def test_mask_frame_mismatch():
    noisy = dsp.stft(np.zeros(3000))[None]
    with pytest.raises(ShapeError):
        dsp.apply_mask(torch.ones(1, 1, noisy.shape[1] + 1, 80), noisy)


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(4).uniform(-0.9, 0.9, 1600)
    dsp.write_wav(tmp_path / "f.wav", x)
    np.testing.assert_allclose(dsp.read_wav(tmp_path / "f.wav"), x, atol=1e-7)
    dsp.write_wav(tmp_path / "i.wav", x, pcm16=True)
    np.testing.assert_allclose(dsp.read_wav(tmp_path / "i.wav"), x, atol=1 / 32768 + 1e-9)


def test_wav_rejects_other_rates(tmp_path):
    from scipy.io import wavfile

    wavfile.write(tmp_path / "r.wav", 8000, np.zeros(100, dtype=np.int16))
    with pytest.raises(DataError):
        dsp.read_wav(tmp_path / "r.wav")
    with pytest.raises(DataError):
        dsp.read_wav(tmp_path / "missing.wav")
