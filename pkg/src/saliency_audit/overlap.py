"""Combining attribution maps and measuring how much they agree."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import metrics

MODES = ("intersection", "union")
SCATTER_HEADER = ("sample_id", "method_a", "method_b", "mode", "iou", "ad", "ff")


def binarize(a_norm, tau: float = 0.5) -> np.ndarray:
    return np.asarray(a_norm) >= tau


def combine(a1, a2, mode: str) -> np.ndarray:
    a1 = np.asarray(a1)
    a2 = np.asarray(a2)
    if a1.shape != a2.shape:
        raise ValueError(f"cannot combine maps of shape {a1.shape} and {a2.shape}")
    if mode == "intersection":
        return np.minimum(a1, a2)
    if mode == "union":
        return np.maximum(a1, a2)
    raise ValueError(f"unknown combine mode {mode!r}")


def iou(m1, m2) -> float:
    m1 = np.asarray(m1, dtype=bool)
    m2 = np.asarray(m2, dtype=bool)
    union = np.count_nonzero(m1 | m2)
    if union == 0:
        return 1.0
    return np.count_nonzero(m1 & m2) / union


@dataclass(frozen=True)
class OverlapRecord:
    sample_id: str
    method_a: str
    method_b: str
    mode: str
    iou: float
    ad: float
    ff: float


def overlap_study(model, samples, maps: dict, tau: float = 0.5, mode: str = "intersection",
                  include_self: bool = False, batch: int = 32) -> list[OverlapRecord]:
    """One record per (sample, unordered method pair).

    ``maps[method][i]`` is the normalized attribution of ``samples[i]``; the
    ``mask`` carried by each sample is ignored. Metrics are evaluated on the
    combined map.
    """
    methods = list(maps)
    if len(methods) < 2 and not include_self:
        raise ValueError("overlap study needs at least two methods")
    if mode not in MODES:
        raise ValueError(f"unknown combine mode {mode!r}")
    pairs = list(combinations(methods, 2))
    if include_self:
        pairs = [(m, m) for m in methods] + pairs
    probs_orig = metrics.original_probs(model, samples, batch)
    records = []
    for a, b in pairs:
        combined = [combine(maps[a][i], maps[b][i], mode) for i in range(len(samples))]
        res = metrics.run_masked(model, samples, combined, probs_orig=probs_orig, batch=batch)
        po, pm, pmo = res.conf("orig"), res.conf("masked"), res.conf("maskout")
        ad = metrics.decrease_terms(po, pm)
        ff = metrics.faithfulness_terms(po, pmo)
        for i, s in enumerate(samples):
            score = iou(binarize(maps[a][i], tau), binarize(maps[b][i], tau))
            records.append(OverlapRecord(s.sample_id, a, b, mode, score, float(ad[i]), float(ff[i])))
    return records


def scatter_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCATTER_HEADER)
    for r in records:
        w.writerow([r.sample_id, r.method_a, r.method_b, r.mode, f"{r.iou:.6f}", f"{r.ad:.6f}", f"{r.ff:.6f}"])
    return buf.getvalue()


def _pearson(x, y) -> float:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if len(x) < 2 or x.std() == 0 or y.std() == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def summarize(records) -> dict:
    """Per-pair means and the IoU-metric correlations across all records."""
    pairs: dict = {}
    for r in records:
        pairs.setdefault((r.method_a, r.method_b), []).append(r)
    per_pair = [
        {
            "method_a": a,
            "method_b": b,
            "n": len(rs),
            "mean_iou": float(np.mean([r.iou for r in rs])),
            "mean_ad": float(np.mean([r.ad for r in rs])),
            "mean_ff": float(np.mean([r.ff for r in rs])),
        }
        for (a, b), rs in pairs.items()
    ]
    ious = [r.iou for r in records]
    return {
        "mode": records[0].mode if records else None,
        "n_records": len(records),
        "pairs": per_pair,
        "pearson_iou_ff": _pearson(ious, [r.ff for r in records]),
        "pearson_iou_ad": _pearson(ious, [r.ad for r in records]),
        "pair_level_pearson_iou_ff": _pearson([p["mean_iou"] for p in per_pair], [p["mean_ff"] for p in per_pair]),
        "mean_ad": float(np.mean([r.ad for r in records])) if records else float("nan"),
        "mean_ff": float(np.mean([r.ff for r in records])) if records else float("nan"),
    }
