import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from saliency_audit import dsp

CFG = dsp.StftConfig()
MEL = dsp.MelConfig()


def _hann(n):
    # periodic Hann written out independently of the module
    return np.array([0.5 - 0.5 * np.cos(2 * np.pi * i / n) for i in range(n)])


def _direct_ola(m, p, cfg, length):
    """Hand-rolled inverse: per-frame inverse DFT, windowed overlap-add, squared-window normalisation."""
    w = _hann(cfg.win_length)
    n_frames = m.shape[0]
    total = (n_frames - 1) * cfg.hop_length + cfg.win_length
    out = np.zeros(total)
    norm = np.zeros(total)
    k = np.arange(cfg.n_bins)
    n = np.arange(cfg.win_length)
    weights = np.where((k == 0) | (k == cfg.n_fft // 2), 1.0, 2.0)
    for t in range(n_frames):
        spec = m[t] * np.exp(1j * p[t])
        frame = (weights[None, :] * spec[None, :] * np.exp(2j * np.pi * n[:, None] * k[None, :] / cfg.n_fft)).real.sum(1)
        frame /= cfg.n_fft
        s = t * cfg.hop_length
        out[s : s + cfg.win_length] += w * frame
        norm[s : s + cfg.win_length] += w**2
    out /= np.where(norm > 1e-10, norm, 1.0)
    return out[cfg.pad : cfg.pad + length]


def test_default_shapes():
    x = np.random.default_rng(0).normal(size=16000) * 0.1
    m, p = dsp.stft(x, CFG)
    assert m.shape == p.shape == (101, 257)
    assert np.all(m >= 0)


def test_sine_peak_bin_matches_direct_dft():
    sr, f = 16000, 1000.0
    x = np.sin(2 * np.pi * f * np.arange(sr) / sr)
    m, _ = dsp.stft(x, CFG)
    # oracle: direct DFT of one interior windowed frame
    frame = x[5000 : 5000 + CFG.win_length] * _hann(CFG.win_length)
    k = np.arange(CFG.n_bins)
    dft = np.abs(np.exp(-2j * np.pi * np.outer(k, np.arange(CFG.win_length)) / CFG.n_fft) @ frame)
    assert int(np.argmax(dft)) == 32
    assert np.all(np.argmax(m[2:-2], axis=1) == 32)


def test_zero_waveform():
    m, p = dsp.stft(np.zeros(4000), CFG)
    assert np.all(m == 0) and np.all(np.isfinite(p))
    assert np.all(dsp.istft(m, p, CFG, 4000) == 0)


def test_errors():
    with pytest.raises(dsp.InvalidInput):
        dsp.stft(np.zeros(CFG.win_length - 1), CFG)
    with pytest.raises(dsp.InvalidInput):
        dsp.stft(np.array([0.0, np.nan] * 400), CFG)
    m, p = dsp.stft(np.ones(1000), CFG)
    with pytest.raises(dsp.InvalidInput):
        dsp.istft(m, p[:-1], CFG)
    with pytest.raises(dsp.InvalidInput):
        dsp.StftConfig(hop_length=500)
    with pytest.raises(dsp.InvalidInput):
        dsp.MelConfig(f_max=9000).validate(16000)


def test_roundtrip_against_hand_ola():
    x = np.random.default_rng(1).uniform(-1, 1, size=16000)
    m, p = dsp.stft(x, CFG)
    y = dsp.istft(m, p, CFG, len(x))
    assert np.linalg.norm(y - x) / np.linalg.norm(x) <= 1e-5
    oracle = _direct_ola(m, p, CFG, len(x))
    assert np.max(np.abs(y - oracle)) < 1e-9


@given(n=st.integers(1200, 4000), seed=st.integers(0, 2**16))
def test_roundtrip_property(n, seed):
    x = np.random.default_rng(seed).normal(size=n)
    m, p = dsp.stft(x, CFG)
    y = dsp.istft(m, p, CFG, n)
    assert np.linalg.norm(y - x) / np.linalg.norm(x) <= 1e-5


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_istft_linear_in_magnitude(a, b, seed):
    r = np.random.default_rng(seed)
    m1, m2 = r.uniform(0, 1, (2, 12, CFG.n_bins))
    p = r.uniform(-np.pi, np.pi, (12, CFG.n_bins))
    lhs = dsp.istft(a * m1 + b * m2, p, CFG)
    rhs = a * dsp.istft(m1, p, CFG) + b * dsp.istft(m2, p, CFG)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_istft_vjp_finite_differences():
    r = np.random.default_rng(2)
    cfg = dsp.StftConfig(sample_rate=1000, win_length=16, hop_length=8, n_fft=32)
    m = r.uniform(0, 1, (7, cfg.n_bins))
    p = r.uniform(-np.pi, np.pi, m.shape)
    v = r.normal(size=dsp.istft(m, p, cfg).shape)
    g = dsp.istft_vjp(v, p, cfg)
    eps = 1e-6
    fd = np.zeros_like(m)
    for idx in np.ndindex(m.shape):
        d = np.zeros_like(m)
        d[idx] = eps
        fd[idx] = (dsp.istft(m + d, p, cfg) @ v - dsp.istft(m - d, p, cfg) @ v) / (2 * eps)
    assert np.max(np.abs(g - fd)) <= 1e-5


def test_istft_vjp_linear_and_zero():
    r = np.random.default_rng(3)
    p = r.uniform(-np.pi, np.pi, (10, CFG.n_bins))
    n = len(dsp.istft(np.zeros(p.shape), p, CFG))
    g1, g2 = r.normal(size=(2, n))
    assert np.all(dsp.istft_vjp(np.zeros(n), p, CFG) == 0)
    lhs = dsp.istft_vjp(2 * g1 - 3 * g2, p, CFG)
    rhs = 2 * dsp.istft_vjp(g1, p, CFG) - 3 * dsp.istft_vjp(g2, p, CFG)
    assert np.allclose(lhs, rhs, atol=1e-12)
    with pytest.raises(dsp.InvalidInput):
        dsp.istft_vjp(np.zeros(n + CFG.win_length), p, CFG)


def test_mel_scale_inverse():
    f = np.linspace(0, 8000, 17)
    assert np.allclose(dsp.mel_to_hz(dsp.hz_to_mel(f)), f)
    # HTK anchor: 1000 Hz is ~1000 mel
    assert abs(dsp.hz_to_mel(1000.0) - 1000.0) < 0.1


def test_filterbank_covers_range():
    fb = dsp.mel_filterbank(CFG, MEL)
    assert fb.shape == (MEL.n_mels, CFG.n_bins)
    assert np.all(fb >= 0)
    assert np.all(fb.sum(axis=1) > 0)
    freqs = dsp.bin_frequencies(CFG)
    inside = (freqs > MEL.f_min) & (freqs < MEL.f_max)
    assert np.all(fb[:, inside].sum(axis=0) > 0)


def test_log_mel_zero_and_scaling():
    z = dsp.log_mel(np.zeros((5, CFG.n_bins)), CFG, MEL)
    assert np.allclose(z, np.log(MEL.log_floor))
    x = np.sin(2 * np.pi * 440 * np.arange(8000) / 16000)
    m, _ = dsp.stft(x, CFG)
    a = dsp.log_mel(m, CFG, MEL)
    b = dsp.log_mel(10 * m, CFG, MEL)
    big = a > np.log(MEL.log_floor) + 20
    assert np.allclose((b - a)[big], np.log(100.0), atol=1e-6)


@pytest.mark.parametrize("f0", [300.0, 1000.0, 2500.0, 5000.0])
def test_log_mel_tone_lands_in_nearest_band(f0):
    x = np.sin(2 * np.pi * f0 * np.arange(16000) / 16000)
    m, _ = dsp.stft(x, CFG)
    lm = dsp.log_mel(m, CFG, MEL)
    # oracle: band centres from the HTK formula, equally spaced on the mel axis
    lo, hi = 2595 * np.log10(1 + MEL.f_min / 700), 2595 * np.log10(1 + MEL.f_max / 700)
    centres = 700 * (10 ** (np.linspace(lo, hi, MEL.n_mels + 2)[1:-1] / 2595) - 1)
    assert np.allclose(dsp.mel_centers(MEL), centres)
    expected = int(np.argmin(np.abs(centres - f0)))
    assert np.all(np.argmax(lm[2:-2], axis=1) == expected)
