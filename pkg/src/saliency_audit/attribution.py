"""Gradient attributions over the magnitude spectrogram.

The explained function is ``m -> logit_c(model(istft(m, phase)))``: the
classifier sees the resynthesised waveform, and input gradients are pulled
back to the magnitude through the transpose of the phase-fixed ISTFT.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .autonn import Classifier, grad_input, layer_capture
from .rng import stream

METHODS = ("saliency", "smoothgrad", "ig", "guided_backprop", "guided_gradcam", "gradient_shap")


class NumericalFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class AttributionConfig:
    ig_steps: int = 64
    ig_baseline: str = "zero"
    sg_samples: int = 25
    sg_sigma_rel: float = 0.1
    shap_samples: int = 25
    shap_sigma_rel: float = 0.0
    gradcam_layer: int = -1
    batch: int = 32
    seed: int = 0

    def __post_init__(self):
        if min(self.ig_steps, self.sg_samples, self.shap_samples, self.batch) < 1:
            raise ValueError("sample counts must be >= 1")
        if self.sg_sigma_rel < 0 or self.shap_sigma_rel < 0:
            raise ValueError("noise levels must be non-negative")
        if self.ig_baseline not in ("zero", "custom"):
            raise ValueError("ig_baseline must be 'zero' or 'custom'")


@dataclass
class AttributionMap:
    raw: np.ndarray
    method: str
    target_class: int
    normalized: np.ndarray = field(init=False)

    def __post_init__(self):
        if not np.all(np.isfinite(self.raw)):
            raise NumericalFailure(f"{self.method}: non-finite attribution")
        self.normalized = normalize(self.raw)


def normalize(raw) -> np.ndarray:
    """Per-sample min-max of ``|raw|`` into [0, 1]; constant input maps to zeros."""
    a = np.abs(np.asarray(raw, dtype=np.float64))
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


class Explained:
    """A classifier composed with phase-fixed resynthesis of one sample."""

    def __init__(self, model: Classifier, phase, length: int | None = None):
        if not model.cfg.waveform_input:
            raise ValueError("explained models must take waveform input")
        self.model = model
        self.phase = np.asarray(phase)
        self.cfg = model.cfg.stft
        self.length = length

    def resynth(self, m) -> np.ndarray:
        return dsp.istft(m, self.phase, self.cfg, self.length)

    def logits(self, mags) -> np.ndarray:
        mags = np.asarray(mags)
        waves = np.stack([self.resynth(m) for m in mags.reshape((-1,) + self.phase.shape)])
        return self.model.logits(waves).reshape(mags.shape[:-2] + (-1,))

    def predicted_class(self, m) -> int:
        return int(np.argmax(self.logits(m)))

    def wave_grads(self, waves, cls, mode="standard", batch=32) -> np.ndarray:
        out = [grad_input(self.model, waves[i : i + batch], cls, mode) for i in range(0, len(waves), batch)]
        g = np.concatenate(out).astype(np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericalFailure("non-finite input gradient")
        return g

    def pullback(self, grad_wave) -> np.ndarray:
        return dsp.istft_vjp(grad_wave, self.phase, self.cfg)

    def grads(self, mags, cls, mode="standard", batch=32) -> np.ndarray:
        """Gradient of the class logit w.r.t. each magnitude in ``mags``."""
        waves = np.stack([self.resynth(m) for m in mags])
        g = self.wave_grads(waves, cls, mode, batch)
        return np.stack([self.pullback(gi) for gi in g])

    def mean_grad(self, mags, cls, mode="standard", batch=32) -> np.ndarray:
        # the pullback is linear, so averaging first saves one ISTFT transpose per point
        waves = np.stack([self.resynth(m) for m in mags])
        return self.pullback(shifted_mean(self.wave_grads(waves, cls, mode, batch)))


def shifted_mean(stack) -> np.ndarray:
    """Mean over axis 0, computed about the first entry so identical entries average exactly."""
    stack = np.asarray(stack)
    return stack[0] + (stack - stack[0]).mean(axis=0)


def _target(ex: Explained, x_f, target_class):
    return ex.predicted_class(x_f) if target_class is None else int(target_class)


def saliency(model, x_f, phase, target_class=None, cfg=AttributionConfig(), key=0, mode="standard"):
    ex = Explained(model, phase)
    c = _target(ex, x_f, target_class)
    wave = ex.resynth(x_f)
    raw = ex.pullback(ex.wave_grads(wave[None], c, mode)[0])
    return AttributionMap(raw, "saliency" if mode == "standard" else "guided_backprop", c)


def guided_backprop(model, x_f, phase, target_class=None, cfg=AttributionConfig(), key=0):
    return saliency(model, x_f, phase, target_class, cfg, key, mode="guided")


def smoothgrad(model, x_f, phase, target_class=None, cfg=AttributionConfig(), key=0):
    ex = Explained(model, phase)
    c = _target(ex, x_f, target_class)
    x_f = np.asarray(x_f, dtype=np.float64)
    sigma = cfg.sg_sigma_rel * (x_f.max() - x_f.min())
    if sigma == 0:
        raw = ex.grads(x_f[None], c, batch=cfg.batch)[0]
    else:
        rng = stream(cfg.seed, "smoothgrad", key)
        noisy = x_f + rng.normal(0.0, sigma, size=(cfg.sg_samples,) + x_f.shape)
        raw = shifted_mean(ex.grads(noisy, c, batch=cfg.batch))
    return AttributionMap(raw, "smoothgrad", c)


def integrated_gradients(model, x_f, phase, target_class=None, cfg=AttributionConfig(), key=0,
                         baseline=None):
    ex = Explained(model, phase)
    c = _target(ex, x_f, target_class)
    x_f = np.asarray(x_f, dtype=np.float64)
    b = np.zeros_like(x_f) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if b.shape != x_f.shape:
        raise ValueError(f"baseline shape {b.shape} differs from input {x_f.shape}")
    alphas = np.arange(1, cfg.ig_steps + 1) / cfg.ig_steps
    path = b + alphas[:, None, None] * (x_f - b)
    raw = (x_f - b) * ex.mean_grad(path, c, batch=cfg.batch)
    return AttributionMap(raw, "ig", c)


def gradient_shap(model, x_f, phase, target_class=None, cfg=AttributionConfig(), key=0,
                  baselines=None):
    ex = Explained(model, phase)
    c = _target(ex, x_f, target_class)
    x_f = np.asarray(x_f, dtype=np.float64)
    if baselines is None:
        baselines = [np.zeros_like(x_f)]
    baselines = [np.asarray(b, dtype=np.float64) for b in baselines]
    if not baselines:
        raise ValueError("gradient_shap needs at least one baseline")
    rng = stream(cfg.seed, "gradient_shap", key)
    pick = rng.integers(len(baselines), size=cfg.shap_samples)
    alpha = rng.uniform(0.0, 1.0, size=cfg.shap_samples)
    sigma = cfg.shap_sigma_rel * (x_f.max() - x_f.min())
    b = np.stack([baselines[i] for i in pick])
    points = b + alpha[:, None, None] * (x_f - b)
    if sigma > 0:
        points = points + rng.normal(0.0, sigma, size=points.shape)
    g = ex.grads(points, c, batch=cfg.batch)
    raw = shifted_mean((x_f - b) * g)
    return AttributionMap(raw, "gradient_shap", c)


def gradcam(activations, gradients) -> np.ndarray:
    """``relu(sum_c mean(grad_c) * act_c)`` for ``[C, H, W]`` arrays."""
    act = np.asarray(activations, dtype=np.float64)
    grad = np.asarray(gradients, dtype=np.float64)
    if act.ndim != 3 or act.shape != grad.shape:
        raise ValueError("gradcam needs matching [channels, height, width] arrays")
    weights = grad.mean(axis=(1, 2))
    return np.maximum(np.tensordot(weights, act, axes=(0, 0)), 0.0)


def _axis_coords(n_out, n_src, fine_coords=None, n_fine=None):
    # centre-aligned source coordinates for each output index
    if fine_coords is None:
        fine_coords = np.arange(n_out, dtype=np.float64)
        n_fine = n_out
    return np.clip((fine_coords + 0.5) * (n_src / n_fine) - 0.5, 0.0, n_src - 1)


def bilinear(grid, rows, cols) -> np.ndarray:
    """Sample ``grid`` at fractional ``rows`` x ``cols`` coordinates."""
    grid = np.asarray(grid, dtype=np.float64)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, grid.shape[0] - 1)
    c1 = np.minimum(c0 + 1, grid.shape[1] - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = grid[np.ix_(r0, c0)] * (1 - fc) + grid[np.ix_(r0, c1)] * fc
    bot = grid[np.ix_(r1, c0)] * (1 - fc) + grid[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def upsample_to_spectrogram(coarse, model: Classifier, shape) -> np.ndarray:
    """Bilinear upsampling of a feature-grid map to ``[frames, bins]``.

    For log-mel models the frequency axis is warped so each FFT bin samples the
    coarse map at its position on the mel axis.
    """
    frames, bins = shape
    rows = _axis_coords(frames, coarse.shape[0])
    if model.cfg.input_kind == "log_mel":
        mel = model.cfg.mel
        lo, hi = dsp.hz_to_mel(mel.f_min), dsp.hz_to_mel(mel.f_max)
        spacing = (hi - lo) / (mel.n_mels + 1)
        band = (dsp.hz_to_mel(dsp.bin_frequencies(model.cfg.stft)) - lo) / spacing - 1.0
        cols = _axis_coords(bins, coarse.shape[1], band, mel.n_mels)
    else:
        cols = _axis_coords(bins, coarse.shape[1])
    return bilinear(coarse, rows, cols)


def guided_gradcam(model, x_f, phase, target_class=None, cfg=AttributionConfig(), key=0, layer_id=None):
    ex = Explained(model, phase)
    c = _target(ex, x_f, target_class)
    layers = model.conv_layers()
    layer_id = cfg.gradcam_layer if layer_id is None else layer_id
    if layer_id < 0:
        layer_id = layers[layer_id]
    wave = ex.resynth(x_f)
    act, grad = layer_capture(model, wave, layer_id, c)
    if act.ndim != 3:
        raise ValueError(f"layer {layer_id} has no spatial dimensions")
    coarse = gradcam(act, grad)
    up = upsample_to_spectrogram(coarse, model, np.shape(x_f))
    gb = guided_backprop(model, x_f, phase, c, cfg, key)
    return AttributionMap(up * gb.raw, "guided_gradcam", c)


_DISPATCH = {
    "saliency": saliency,
    "smoothgrad": smoothgrad,
    "ig": integrated_gradients,
    "guided_backprop": guided_backprop,
    "guided_gradcam": guided_gradcam,
    "gradient_shap": gradient_shap,
}


def attribute(method: str, model, x_f, phase, target_class=None, cfg=AttributionConfig(), key=0):
    try:
        fn = _DISPATCH[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; valid: {', '.join(METHODS)}") from None
    return fn(model, x_f, phase, target_class, cfg, key)
