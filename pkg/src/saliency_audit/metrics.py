"""Faithfulness, conciseness, classification and selective metrics.

Confidence-based metrics compare the classifier's probability for ``c``, its
predicted class on the unmasked resynthesis, across three inputs built from
the same magnitude and phase:

* original: ``istft(X, phase)``
* masked:   ``istft(A * X, phase)``
* maskout:  ``istft((1 - A) * X, phase)``

where ``A`` is the normalized attribution in [0, 1].
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import dsp

TABLE_COLUMNS = ("AI", "AD", "AG", "FF", "Fid-In", "SPS", "COMP")
REPORT_HEADER = ("method", "fold") + TABLE_COLUMNS + ("mask_mean", "mask_std")


@dataclass
class EvalSample:
    sample_id: str
    x_f: np.ndarray
    phase: np.ndarray
    label: int
    mask: np.ndarray  # normalized attribution
    length: int | None = None

    def __post_init__(self):
        if self.x_f.shape != self.phase.shape or self.x_f.shape != self.mask.shape:
            raise ValueError(f"{self.sample_id}: magnitude, phase and mask shapes differ")


def masked_predict(model, s: EvalSample, use_mask: bool = True, mask=None) -> np.ndarray:
    m = s.x_f * (s.mask if mask is None else mask) if use_mask else s.x_f
    wave = dsp.istft(m, s.phase, model.cfg.stft, s.length)
    return model.predict_proba(wave)


def _probs(model, samples, masks, batch=32) -> np.ndarray:
    waves = []
    for s, m in zip(samples, masks):
        mag = s.x_f if m is None else s.x_f * m
        waves.append(dsp.istft(mag, s.phase, model.cfg.stft, s.length))
    return model.predict_proba(np.stack(waves), batch)


def original_probs(model, samples, batch=32) -> np.ndarray:
    return _probs(model, samples, [None] * len(samples), batch)


@dataclass
class MaskedOutputs:
    probs_orig: np.ndarray
    probs_masked: np.ndarray
    probs_maskout: np.ndarray

    @property
    def target(self) -> np.ndarray:
        return self.probs_orig.argmax(axis=1)

    def conf(self, which: str) -> np.ndarray:
        p = getattr(self, f"probs_{which}")
        return p[np.arange(len(p)), self.target]


def run_masked(model, samples, masks=None, probs_orig=None, batch=32) -> MaskedOutputs:
    """Classifier outputs on original, masked and maskout inputs for each sample."""
    masks = [s.mask for s in samples] if masks is None else masks
    if probs_orig is None:
        probs_orig = original_probs(model, samples, batch)
    return MaskedOutputs(
        probs_orig,
        _probs(model, samples, masks, batch),
        _probs(model, samples, [1.0 - m for m in masks], batch),
    )


# per-sample terms; the aggregate metrics are their means

def increase_terms(p_orig, p_masked) -> np.ndarray:
    return 100.0 * (np.asarray(p_masked) > np.asarray(p_orig))


def decrease_terms(p_orig, p_masked) -> np.ndarray:
    po, pm = np.asarray(p_orig, float), np.asarray(p_masked, float)
    return 100.0 * np.maximum(0.0, po - pm) / po


def gain_terms(p_orig, p_masked) -> np.ndarray:
    po, pm = np.asarray(p_orig, float), np.asarray(p_masked, float)
    gain = np.maximum(0.0, pm - po)
    headroom = 1.0 - po
    return 100.0 * np.divide(gain, headroom, out=np.zeros_like(gain), where=headroom > 0)


def faithfulness_terms(p_orig, p_maskout) -> np.ndarray:
    return np.asarray(p_orig, float) - np.asarray(p_maskout, float)


def fid_in_terms(probs_orig, probs_masked) -> np.ndarray:
    return 100.0 * (np.argmax(probs_orig, axis=-1) == np.argmax(probs_masked, axis=-1))


def average_increase(p_orig, p_masked) -> float:
    return float(np.mean(increase_terms(p_orig, p_masked)))


def average_decrease(p_orig, p_masked) -> float:
    return float(np.mean(decrease_terms(p_orig, p_masked)))


def average_gain(p_orig, p_masked) -> float:
    return float(np.mean(gain_terms(p_orig, p_masked)))


def faithfulness(p_orig, p_maskout) -> float:
    return float(np.mean(faithfulness_terms(p_orig, p_maskout)))


def fid_in(probs_orig, probs_masked) -> float:
    return float(np.mean(fid_in_terms(probs_orig, probs_masked)))


def sparseness(a) -> float:
    """Gini index of the flattened non-negative attribution."""
    v = np.sort(np.abs(np.ravel(np.asarray(a, dtype=np.float64))))
    n = v.size
    total = v.sum()
    if total == 0:
        return 0.0
    i = np.arange(1, n + 1)
    return float(np.sum((2 * i - n - 1) * v) / (n * total))


def complexity(a) -> float:
    """Shannon entropy (nats) of the attribution mass distribution."""
    v = np.abs(np.ravel(np.asarray(a, dtype=np.float64)))
    total = v.sum()
    if total == 0:
        return 0.0
    p = v / total
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


# classification and selective metrics

def classification_metrics(preds, labels, n_classes: int | None = None) -> tuple[float, float]:
    """Accuracy and macro F1 (a class with P + R = 0 scores 0)."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    k = n_classes or int(max(preds.max(initial=0), labels.max(initial=0)) + 1)
    acc = float(np.mean(preds == labels))
    f1s = []
    for c in range(k):
        tp = np.sum((preds == c) & (labels == c))
        fp = np.sum((preds == c) & (labels != c))
        fn = np.sum((preds != c) & (labels == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return acc, float(np.mean(f1s))


def accuracy_terms(preds, labels) -> np.ndarray:
    return (np.asarray(preds) == np.asarray(labels)).astype(np.float64)


def f1_terms(preds, labels, n_classes: int | None = None) -> np.ndarray:
    """Per-sample shares of macro F1; their mean equals ``classification_metrics(...)[1]``.

    A correct prediction of class ``c`` carries ``2 / (K * (2TP_c + FP_c + FN_c))``
    of the total, scaled by N; wrong predictions carry nothing.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    n = len(labels)
    k = n_classes or int(max(preds.max(initial=0), labels.max(initial=0)) + 1)
    out = np.zeros(n)
    for c in range(k):
        denom = np.sum(preds == c) + np.sum(labels == c)  # 2TP + FP + FN
        hit = (preds == c) & (labels == c)
        if denom:
            out[hit] = n * 2.0 / (k * denom)
    return out


METRIC_FNS = {"accuracy": accuracy_terms, "f1": f1_terms}


def selective_metric(scores, mask_means) -> float:
    """Mean of per-sample scores weighted by ``1 - mean(normalized attribution)``."""
    scores = np.asarray(scores, dtype=np.float64)
    mask_means = np.broadcast_to(np.asarray(mask_means, dtype=np.float64), scores.shape)
    if np.any(mask_means < 0) or np.any(mask_means > 1):
        raise ValueError("mask means must lie in [0, 1]")
    return float(np.mean(scores * (1.0 - mask_means)))


# reports

@dataclass
class MetricReport:
    method: str
    n: int
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    mask_mean: float = 0.0
    mask_std: float = 0.0

    def row(self, fold="0") -> list:
        return [self.method, fold] + [self.mean[c] for c in TABLE_COLUMNS] + [self.mask_mean, self.mask_std]


def per_sample_terms(out: MaskedOutputs, masks) -> dict:
    po, pm, pmo = out.conf("orig"), out.conf("masked"), out.conf("maskout")
    return {
        "AI": increase_terms(po, pm),
        "AD": decrease_terms(po, pm),
        "AG": gain_terms(po, pm),
        "FF": faithfulness_terms(po, pmo),
        "Fid-In": fid_in_terms(out.probs_orig, out.probs_masked),
        "SPS": np.array([sparseness(m) for m in masks]),
        "COMP": np.array([complexity(m) for m in masks]),
    }


def metric_report(method: str, out: MaskedOutputs, masks) -> MetricReport:
    terms = per_sample_terms(out, masks)
    pooled = np.concatenate([np.ravel(m) for m in masks])
    return MetricReport(
        method=method,
        n=len(masks),
        mean={k: float(np.mean(v)) for k, v in terms.items()},
        std={k: float(np.std(v)) for k, v in terms.items()},
        mask_mean=float(np.mean([np.mean(m) for m in masks])),
        mask_std=float(np.std(pooled)),
    )


def evaluate(model, samples, method: str = "") -> MetricReport:
    out = run_masked(model, samples)
    return metric_report(method, out, [s.mask for s in samples])


def _fmt(x) -> str:
    return f"{x:.6f}"


def report_csv(reports_by_fold: dict[str, list[MetricReport]]) -> str:
    """One row per (method, fold) then one ``mean±std`` row per method across folds."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    methods = []
    for fold, reports in reports_by_fold.items():
        for r in reports:
            w.writerow([r.method, fold] + [_fmt(v) for v in r.row()[2:]])
            if r.method not in methods:
                methods.append(r.method)
    for method in methods:
        rows = [r.row() for reps in reports_by_fold.values() for r in reps if r.method == method]
        vals = np.array([row[2:] for row in rows], dtype=np.float64)
        cells = [f"{m:.4f}±{s:.4f}" for m, s in zip(vals.mean(axis=0), vals.std(axis=0))]
        w.writerow([method, "mean±std"] + cells)
    return buf.getvalue()
