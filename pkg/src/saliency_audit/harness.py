"""Synthetic surrogate corpus, stratified splitting and the retrain-on-explanations test.

Control samples are a vowel-like harmonic tone; tremor samples carry the same
tone with a slow sinusoidal amplitude and frequency modulation. Each sample
records the spectrogram bins around every partial that the modulation
touches, which serves as a ground-truth relevance region.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import dsp, metrics
from .autonn import Classifier, ModelConfig, TrainConfig, TrainingDiverged, train
from .rng import stream

log = logging.getLogger(__name__)

LABELS = ("control", "tremor")


@dataclass(frozen=True)
class SynthConfig:
    n_per_class: int = 200
    duration_s: float = 1.0
    f0_range: tuple = (120.0, 220.0)
    tremor_rate: float = 5.0
    tremor_depth: float = 0.4
    snr_db: float = 20.0
    seed: int = 0
    sample_rate: int = 16000
    n_harmonics: int = 3
    # frequency deviation of the modulation, as a fraction of depth * f0
    fm_scale: float = 0.25

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.duration_s < 0.5:
            raise ValueError("duration_s must be >= 0.5")
        if not 0.0 < self.tremor_depth < 1.0:
            raise ValueError("tremor_depth must lie in (0, 1)")
        lo, hi = self.f0_range
        if not 0 < lo <= hi:
            raise ValueError("invalid f0_range")
        if (self.n_harmonics + 1) * hi * (1 + self.fm_scale) >= self.sample_rate / 2:
            raise ValueError("harmonics exceed the Nyquist frequency")


@dataclass
class SynthSample:
    sample_id: str
    waveform: np.ndarray
    label: int
    f0: float
    ground_truth: np.ndarray  # bool [frames, bins]
    seed: tuple = field(default=())

    @property
    def label_name(self) -> str:
        return LABELS[self.label]


HARMONIC_GAINS = (1.0, 0.6, 0.45, 0.3, 0.2, 0.15)


def _synthesize(cfg: SynthConfig, rng: np.random.Generator, tremor: bool, f0: float) -> np.ndarray:
    n = int(round(cfg.duration_s * cfg.sample_rate))
    t = np.arange(n) / cfg.sample_rate
    depth = cfg.tremor_depth if tremor else 0.0
    mod_phase = rng.uniform(0, 2 * np.pi)
    mod = np.sin(2 * np.pi * cfg.tremor_rate * t + mod_phase)
    inst_f = f0 * (1.0 + cfg.fm_scale * depth * mod)
    phase = 2 * np.pi * np.cumsum(inst_f) / cfg.sample_rate
    partials = np.zeros(n)
    for k in range(1, cfg.n_harmonics + 2):
        gain = HARMONIC_GAINS[min(k - 1, len(HARMONIC_GAINS) - 1)]
        partials += gain * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    clean = (1.0 + depth * mod) * partials
    fade = min(n // 10, int(0.05 * cfg.sample_rate))
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
    clean[:fade] *= ramp
    clean[n - fade:] *= ramp[::-1]
    target_rms = 0.1 * rng.uniform(0.7, 1.3)
    clean *= target_rms / np.sqrt(np.mean(clean**2))
    noise = rng.normal(size=n)
    noise *= target_rms / 10 ** (cfg.snr_db / 20) / np.sqrt(np.mean(noise**2))
    return np.clip(clean + noise, -1.0, 1.0)


def ground_truth_region(cfg: SynthConfig, f0: float, tremor: bool, stft_cfg: dsp.StftConfig) -> np.ndarray:
    """Bins within the modulation band of each partial (empty for control samples)."""
    n = int(round(cfg.duration_s * cfg.sample_rate))
    frames = stft_cfg.n_frames(n)
    mask = np.zeros((frames, stft_cfg.n_bins), dtype=bool)
    if not tremor:
        return mask
    freqs = dsp.bin_frequencies(stft_cfg)
    half_bin = stft_cfg.sample_rate / stft_cfg.n_fft / 2
    dev = cfg.fm_scale * cfg.tremor_depth
    for k in range(1, cfg.n_harmonics + 2):
        lo = k * f0 * (1 - dev) - cfg.tremor_rate - half_bin
        hi = k * f0 * (1 + dev) + cfg.tremor_rate + half_bin
        mask[:, (freqs >= lo) & (freqs <= hi)] = True
    return mask


def generate_sample(cfg: SynthConfig, index: int, stft_cfg: dsp.StftConfig | None = None) -> SynthSample:
    """Sample ``index`` of the dataset; controls occupy the first ``n_per_class`` slots."""
    stft_cfg = stft_cfg or dsp.StftConfig(sample_rate=cfg.sample_rate)
    label = index // cfg.n_per_class
    rng = stream(cfg.seed, "synth", index)
    f0 = float(rng.uniform(*cfg.f0_range))
    wave = _synthesize(cfg, rng, bool(label), f0)
    gt = ground_truth_region(cfg, f0, bool(label), stft_cfg)
    return SynthSample(f"s{index:04d}", wave, label, f0, gt, (cfg.seed, index))


def generate_dataset(cfg: SynthConfig = SynthConfig(), stft_cfg: dsp.StftConfig | None = None) -> list[SynthSample]:
    return [generate_sample(cfg, i, stft_cfg) for i in range(2 * cfg.n_per_class)]


# splitting

@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.70, 0.15, 0.15)
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if any(f <= 0 for f in self.fractions) or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must be positive and sum to 1")


def largest_remainder(total: int, fractions) -> np.ndarray:
    quotas = total * np.asarray(fractions, dtype=np.float64)
    counts = np.floor(quotas).astype(int)
    short = total - counts.sum()
    order = np.argsort(-(quotas - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def split(labels, spec: SplitSpec = SplitSpec()) -> list[np.ndarray]:
    """Index arrays, one per fraction, partitioning ``range(len(labels))``."""
    labels = np.asarray(labels)
    n_parts = len(spec.fractions)
    totals = largest_remainder(len(labels), spec.fractions)
    rng = stream(spec.seed, "split")
    if not spec.stratified:
        perm = rng.permutation(len(labels))
        bounds = np.concatenate([[0], np.cumsum(totals)])
        return [np.sort(perm[bounds[j] : bounds[j + 1]]) for j in range(n_parts)]
    classes = np.unique(labels)
    for c in classes:
        if np.sum(labels == c) < n_parts:
            raise ValueError(f"class {c} has fewer samples than splits")
    fr = np.asarray(spec.fractions)
    quotas = np.array([np.sum(labels == c) * fr for c in classes])
    cells = np.floor(quotas).astype(int)
    deficit = totals - cells.sum(axis=0)
    leftover = np.array([np.sum(labels == c) for c in classes]) - cells.sum(axis=1)
    remainders = quotas - cells
    order = sorted(
        ((ci, j) for ci in range(len(classes)) for j in range(n_parts)),
        key=lambda cj: (-remainders[cj], cj),
    )
    for ci, j in order:
        if leftover[ci] > 0 and deficit[j] > 0:
            cells[ci, j] += 1
            leftover[ci] -= 1
            deficit[j] -= 1
    for ci in range(len(classes)):
        while leftover[ci] > 0:
            j = int(np.argmax(deficit))
            cells[ci, j] += 1
            leftover[ci] -= 1
            deficit[j] -= 1
    parts = [[] for _ in range(n_parts)]
    for ci, c in enumerate(classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        bounds = np.concatenate([[0], np.cumsum(cells[ci])])
        for j in range(n_parts):
            parts[j].extend(idx[bounds[j] : bounds[j + 1]])
    return [np.sort(np.asarray(p, dtype=int)) for p in parts]


def localization_score(a_norm, gt) -> float:
    a = np.asarray(a_norm, dtype=np.float64)
    total = a.sum()
    if total <= 0:
        return 0.0
    return float(a[np.asarray(gt, dtype=bool)].sum() / total)


# retraining on explanations

RETRAIN_HEADER = ("method", "accuracy", "selective_accuracy", "f1", "selective_f1", "mask_mean", "mask_std", "error")
BASELINE = "original_spectrogram"
MASK_INPUTS = ("map", "masked_spectrogram")


@dataclass
class ExplainedSample:
    sample_id: str
    label: int
    x_f: np.ndarray
    maps: dict  # method -> normalized attribution


@dataclass
class RetrainRow:
    method: str
    accuracy: float | None = None
    selective_accuracy: float | None = None
    f1: float | None = None
    selective_f1: float | None = None
    mask_mean: float | None = None
    mask_std: float | None = None
    error: str = ""

    def cells(self) -> list[str]:
        vals = [self.accuracy, self.selective_accuracy, self.f1, self.selective_f1, self.mask_mean, self.mask_std]
        return [self.method] + ["" if v is None else f"{v:.6f}" for v in vals] + [self.error]


@dataclass
class RetrainReport:
    rows: list
    split_sizes: tuple = ()

    def row(self, method: str) -> RetrainRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_csv(self) -> str:
        import csv
        import io

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RETRAIN_HEADER)
        for r in self.rows:
            w.writerow(r.cells())
        return buf.getvalue()


def _fit_and_score(cfg: ModelConfig, inputs, labels, parts, train_cfg: TrainConfig, seed: int):
    tr, va, te = parts
    model = Classifier(cfg, seed=seed).calibrate(inputs[tr])
    model, _ = train(model, inputs[tr], labels[tr], train_cfg, val=(inputs[va], labels[va]))
    return model.predict(inputs[te])


def retrain_on_explanations(base_model: Classifier, eval_set, methods, train_cfg: TrainConfig = TrainConfig(),
                            split_spec: SplitSpec = SplitSpec(), mask_input: str = "map") -> RetrainReport:
    """Train a fresh classifier per method on its attribution maps and score it.

    Every method shares one stratified split of ``eval_set`` so rows are
    paired. A baseline row trained on log-mel features of the original
    magnitude spectrograms comes first; it has no mask, so its selective and
    mask columns stay empty. Failures are recorded in the ``error`` column.
    """
    if mask_input not in MASK_INPUTS:
        raise ValueError(f"mask_input must be one of {MASK_INPUTS}")
    labels = np.array([s.label for s in eval_set], dtype=np.int64)
    parts = split(labels, split_spec)
    te = parts[2]
    k = base_model.cfg.n_classes
    x_f = np.stack([s.x_f for s in eval_set]).astype(np.float32)

    def seed_for(name):
        return int(stream(train_cfg.seed, f"retrain:{name}").integers(2**31))

    rows = []
    base_cfg = replace(base_model.cfg, input_kind="log_mel", waveform_input=False)
    try:
        preds = _fit_and_score(base_cfg, x_f, labels, parts, train_cfg, seed_for(BASELINE))
        acc, f1 = metrics.classification_metrics(preds, labels[te], k)
        rows.append(RetrainRow(BASELINE, acc, None, f1, None))
    except (TrainingDiverged, FloatingPointError, ValueError) as exc:
        rows.append(RetrainRow(BASELINE, error=f"{type(exc).__name__}: {exc}"))

    kind = "magnitude" if mask_input == "map" else "log_mel"
    mask_cfg = replace(base_model.cfg, input_kind=kind, waveform_input=False)
    for method in methods:
        try:
            maps = np.stack([s.maps[method] for s in eval_set]).astype(np.float32)
            inputs = maps if mask_input == "map" else maps * x_f
            preds = _fit_and_score(mask_cfg, inputs, labels, parts, train_cfg, seed_for(method))
            mask_means = maps[te].reshape(len(te), -1).mean(axis=1).astype(np.float64)
            acc_t = metrics.accuracy_terms(preds, labels[te])
            f1_t = metrics.f1_terms(preds, labels[te], k)
            rows.append(RetrainRow(
                method,
                float(acc_t.mean()),
                metrics.selective_metric(acc_t, mask_means),
                float(f1_t.mean()),
                metrics.selective_metric(f1_t, mask_means),
                float(maps.reshape(len(maps), -1).mean(axis=1).mean()),
                float(maps.astype(np.float64).std()),
            ))
        except (TrainingDiverged, FloatingPointError, ValueError, KeyError) as exc:
            log.warning("retraining on %s failed: %s", method, exc)
            rows.append(RetrainRow(method, error=f"{type(exc).__name__}: {exc}"))
    return RetrainReport(rows, tuple(len(p) for p in parts))


# dataset manifest

def manifest_record(sample: SynthSample, wav_path: str, gt_path: str) -> dict:
    return {
        "sample_id": sample.sample_id,
        "wav": wav_path,
        "label": sample.label,
        "label_name": sample.label_name,
        "f0": round(sample.f0, 9),
        "seed": list(sample.seed),
        "ground_truth": gt_path,
    }
