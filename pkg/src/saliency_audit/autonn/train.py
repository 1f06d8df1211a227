"""Mini-batch SGD with momentum for :class:`Classifier`."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import Classifier

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.002
    epochs: int = 50
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ValueError(f"invalid training config {self}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


def _featurize(model: Classifier, x, batch=64) -> np.ndarray:
    x = np.asarray(x, dtype=model.dtype)
    return np.concatenate([model.features(x[i : i + batch]).data for i in range(0, len(x), batch)])


def _accuracy(model, feats, labels, batch=64) -> float:
    preds = np.concatenate(
        [model.body(feats[i : i + batch]).data.argmax(axis=1) for i in range(0, len(feats), batch)]
    )
    return float(np.mean(preds == labels))


def train(model: Classifier, inputs, labels, cfg: TrainConfig, val=None):
    """Train ``model`` in place; return ``(model, history)``.

    ``history`` holds one dict per epoch with keys epoch, loss, train_acc,
    val_acc (NaN without a validation set). The front end has no parameters,
    so features are computed once up front.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("empty training set")
    if labels.min() < 0 or labels.max() >= model.cfg.n_classes:
        raise ValueError("labels out of range")
    history = []
    if cfg.epochs == 0:
        return model, history
    feats = _featurize(model, inputs)
    val_feats = val_labels = None
    if val is not None and len(val[1]):
        val_feats = _featurize(model, val[0])
        val_labels = np.asarray(val[1], dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)
    velocity = {k: np.zeros_like(p.data) for k, p in model.params.items()}
    lr = model.dtype.type(cfg.learning_rate)
    mom = model.dtype.type(cfg.momentum)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(labels))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = T.softmax_cross_entropy(model.body(feats[idx]), labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: {loss.data}"
                )
            for p in model.params.values():
                p.grad = None
            loss.backward()
            for k, p in model.params.items():
                velocity[k] = mom * velocity[k] + p.grad
                p.data -= lr * velocity[k]
                p.grad = None
            total += float(loss.data) * len(idx)
        row = {
            "epoch": epoch,
            "loss": total / len(labels),
            "train_acc": _accuracy(model, feats, labels),
            "val_acc": _accuracy(model, val_feats, val_labels) if val_feats is not None else float("nan"),
        }
        history.append(row)
        log.debug("epoch %d loss %.4f train %.3f val %.3f", epoch, row["loss"], row["train_acc"], row["val_acc"])
    return model, history
