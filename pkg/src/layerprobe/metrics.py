"""Top-1 accuracy, average precision and macro mAP, plus evaluation reports."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import models
from .bank import EmbeddingBank


@dataclass
class EvalReport:
    task: str
    metric: str
    value: float
    num_samples: int
    per_class_ap: list[float | None] | None = None
    excluded_classes: list[int] | None = None
    layer_weights: list[float] | None = None

    def to_json(self) -> dict:
        doc = {"task": self.task, "metric": self.metric, "value": self.value, "num_samples": self.num_samples}
        if self.per_class_ap is not None:
            doc["per_class_ap"] = self.per_class_ap
            doc["excluded_classes"] = self.excluded_classes
        if self.layer_weights is not None:
            doc["layer_weights"] = self.layer_weights
        return doc


def top1_accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax equals the label; ties go to the lowest index."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if logits.shape[0] < 1:
        raise ValueError("top1_accuracy needs at least one sample")
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def average_precision(scores, positives) -> float:
    """Mean of precision@k over the ranks k of the positives.

    Ranking is by descending score with ties broken toward the lower sample
    index; no interpolation, no cutoff. The precisions are summed as exact
    rationals and rounded once, so the result is the correctly rounded AP.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives).astype(bool)
    if scores.shape != pos.shape or scores.ndim != 1:
        raise ValueError("scores and positives must be equal-length vectors")
    if not pos.any():
        raise ValueError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = pos[order]
    ranks = np.flatnonzero(hits) + 1
    total = sum(Fraction(i, int(k)) for i, k in enumerate(ranks, start=1))
    return float(total / ranks.size)


def macro_map(scores, targets) -> EvalReport:
    """Mean per-class AP over the classes that have at least one positive."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.shape != targets.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and targets {targets.shape} must be equal (N, C) arrays")
    per, excluded = [], []
    for c in range(scores.shape[1]):
        if targets[:, c].any():
            per.append(average_precision(scores[:, c], targets[:, c]))
        else:
            per.append(None)
            excluded.append(c)
    kept = [ap for ap in per if ap is not None]
    if not kept:
        raise ValueError("no class has a positive sample")
    return EvalReport(task="multi_label", metric="macro_map", value=float(sum(map(Fraction, kept)) / len(kept)),
                      num_samples=scores.shape[0], per_class_ap=per, excluded_classes=excluded)


def predict_logits(bank: EmbeddingBank, model: models.ProbeModel, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for every sample of ``bank``."""
    used = set(model.used_layers)
    out = []
    for start in range(0, bank.num_samples, batch_size):
        idx = slice(start, start + batch_size)
        layers = [bank.layer(l, idx) if l in used else None for l in range(bank.num_layers)]
        out.append(models.forward(model, layers, training=False))
    return np.concatenate(out, axis=0)


def evaluate(bank: EmbeddingBank, model: models.ProbeModel) -> EvalReport:
    models.check_compatible(bank, model)
    logits = predict_logits(bank, model)
    if bank.manifest.task == "single_label":
        report = EvalReport(task="single_label", metric="top1_acc", value=top1_accuracy(logits, bank.labels),
                            num_samples=bank.num_samples)
    else:
        report = macro_map(logits, bank.labels)
    alpha = model.layer_alpha()
    if alpha is not None:
        report.layer_weights = alpha.tolist()
    return report
