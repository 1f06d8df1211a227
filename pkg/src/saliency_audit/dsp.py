"""Waveform <-> magnitude/phase conversion and log-mel features.

Frames are centred: the signal is zero-padded by ``win_length // 2`` on both
sides before framing, so with ``L`` input samples there are
``1 + L // hop_length`` frames (for ``win_length`` even) and the inverse can
trim back to exactly ``L`` samples. Each windowed frame is zero-padded to
``n_fft`` before the real FFT. Magnitude and Phase are ``[frames, n_fft//2+1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class InvalidInput(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    win_length: int = 400
    hop_length: int = 160
    n_fft: int = 512
    window: str = "hann"

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidInput("sample_rate must be positive")
        if not 0 < self.hop_length <= self.win_length <= self.n_fft:
            raise InvalidInput("need 0 < hop_length <= win_length <= n_fft")
        if self.window != "hann":
            raise InvalidInput(f"unsupported window {self.window!r}")
        w2 = self.window_array() ** 2
        # overlap-add of the squared window must never vanish, else the
        # inverse is not defined at those samples
        acc = np.zeros(self.hop_length)
        for start in range(0, self.win_length, self.hop_length):
            seg = w2[start:start + self.hop_length]
            acc[: len(seg)] += seg
        if acc.min() <= 1e-10:
            raise InvalidInput("window/hop pair violates the overlap-add condition")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def pad(self) -> int:
        return self.win_length // 2

    def window_array(self) -> np.ndarray:
        return _hann(self.win_length)

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples + 2 * self.pad - self.win_length) // self.hop_length

    def padded_length(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop_length + self.win_length


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 40
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-10

    def validate(self, sample_rate: int) -> None:
        if self.n_mels < 1:
            raise InvalidInput("n_mels must be >= 1")
        if not 0 <= self.f_min < self.f_max <= sample_rate / 2:
            raise InvalidInput("need 0 <= f_min < f_max <= sample_rate/2")
        if self.log_floor <= 0:
            raise InvalidInput("log_floor must be positive")


@lru_cache(maxsize=8)
def _hann(n: int) -> np.ndarray:
    # periodic Hann
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Centre-pad and cut into overlapping frames ``[frames, win_length]`` (a view)."""
    xp = np.pad(x, (cfg.pad, cfg.pad))
    n = cfg.n_frames(len(x))
    view = np.lib.stride_tricks.sliding_window_view(xp, cfg.win_length)
    return view[: (n - 1) * cfg.hop_length + 1 : cfg.hop_length]


def stft(x, cfg: StftConfig) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x)
    if x.ndim != 1:
        raise InvalidInput("waveform must be one-dimensional")
    if len(x) < cfg.win_length:
        raise InvalidInput(f"signal of {len(x)} samples is shorter than one window")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("waveform contains non-finite values")
    frames = frame_signal(x, cfg) * cfg.window_array()
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=-1)
    return np.abs(spec), np.angle(spec)


def _ola_norm(n_frames: int, cfg: StftConfig) -> np.ndarray:
    w2 = cfg.window_array() ** 2
    norm = np.zeros(cfg.padded_length(n_frames))
    for t in range(n_frames):
        norm[t * cfg.hop_length : t * cfg.hop_length + cfg.win_length] += w2
    return norm


def _default_length(n_frames: int, cfg: StftConfig) -> int:
    return cfg.padded_length(n_frames) - 2 * cfg.pad


def istft(m, p, cfg: StftConfig, length: int | None = None) -> np.ndarray:
    """Overlap-add resynthesis from magnitude ``m`` and phase ``p``.

    Frames are windowed again and the sum is divided by the overlap-added
    squared window. The result is trimmed to ``length`` samples (defaults to
    the length that produced ``m.shape[0]`` frames).
    """
    m = np.asarray(m)
    p = np.asarray(p)
    if m.shape != p.shape:
        raise InvalidInput(f"magnitude {m.shape} and phase {p.shape} differ in shape")
    if m.ndim != 2 or m.shape[1] != cfg.n_bins:
        raise InvalidInput(f"expected [frames, {cfg.n_bins}] spectrogram, got {m.shape}")
    n_frames = m.shape[0]
    frames = np.fft.irfft(m * np.exp(1j * p), n=cfg.n_fft, axis=-1)[:, : cfg.win_length]
    frames = frames * cfg.window_array()
    out = np.zeros(cfg.padded_length(n_frames), dtype=frames.dtype)
    for t in range(n_frames):
        out[t * cfg.hop_length : t * cfg.hop_length + cfg.win_length] += frames[t]
    norm = _ola_norm(n_frames, cfg)
    out = np.divide(out, norm, out=np.zeros_like(out), where=norm > 1e-10)
    return _trim(out, n_frames, cfg, length)


def _trim(full: np.ndarray, n_frames: int, cfg: StftConfig, length: int | None) -> np.ndarray:
    if length is None:
        length = _default_length(n_frames, cfg)
    out = full[cfg.pad : cfg.pad + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out


def istft_vjp(grad_wave, p, cfg: StftConfig) -> np.ndarray:
    """Transpose of the (phase-fixed, linear) map ``m -> istft(m, p)`` applied to ``grad_wave``."""
    g = np.asarray(grad_wave)
    p = np.asarray(p)
    n_frames = p.shape[0]
    if g.ndim != 1:
        raise InvalidInput("gradient must be one-dimensional")
    full_len = cfg.padded_length(n_frames)
    if len(g) > full_len - cfg.pad:
        raise InvalidInput(
            f"gradient of length {len(g)} does not match {n_frames} frames"
        )
    full = np.zeros(full_len, dtype=np.result_type(g.dtype, np.float32))
    full[cfg.pad : cfg.pad + len(g)] = g
    norm = _ola_norm(n_frames, cfg)
    full = np.divide(full, norm, out=np.zeros_like(full), where=norm > 1e-10)
    view = np.lib.stride_tricks.sliding_window_view(full, cfg.win_length)
    frames = view[:: cfg.hop_length][:n_frames] * cfg.window_array()
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=-1)
    scale = np.full(cfg.n_bins, 2.0 / cfg.n_fft)
    scale[0] = 1.0 / cfg.n_fft
    if cfg.n_fft % 2 == 0:
        scale[-1] = 1.0 / cfg.n_fft
    return scale * np.real(np.exp(1j * p) * np.conj(spec))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(mel: MelConfig) -> np.ndarray:
    pts = np.linspace(hz_to_mel(mel.f_min), hz_to_mel(mel.f_max), mel.n_mels + 2)
    return mel_to_hz(pts)[1:-1]


def mel_filterbank(cfg: StftConfig, mel: MelConfig) -> np.ndarray:
    """Triangular filters with unit peak, shape ``[n_mels, n_bins]``."""
    mel.validate(cfg.sample_rate)
    return _mel_filterbank(cfg.sample_rate, cfg.n_fft, mel.n_mels, mel.f_min, mel.f_max)


@lru_cache(maxsize=16)
def _mel_filterbank(sr, n_fft, n_mels, f_min, f_max) -> np.ndarray:
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def log_mel(m, cfg: StftConfig, mel: MelConfig) -> np.ndarray:
    fb = mel_filterbank(cfg, mel)
    power = np.asarray(m) ** 2
    return np.log(power @ fb.T + mel.log_floor)


def bin_frequencies(cfg: StftConfig) -> np.ndarray:
    return np.arange(cfg.n_bins) * cfg.sample_rate / cfg.n_fft
