"""Evaluation metrics: accuracy, rank-based AUC, macro precision/recall/F1.

AUC is the probability that a uniformly random positive outranks a uniformly
random negative, ties credited 0.5. The midrank formulation used here equals
exhaustive pair counting exactly (midrank sums are multiples of 0.5, exactly
representable), which the tests verify against an O(n^2) oracle. Binary
tasks score the positive-class probability; multiclass tasks macro-average
one-vs-rest AUCs over classes that have both positives and negatives.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .amil import AmilModel, predict_proba
from .data import Dataset, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassMetrics:
    label: int
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    auc: float
    precision: float  # macro over classes present in the split
    recall: float
    f1: float  # harmonic mean of the macro precision and recall
    per_class: tuple[ClassMetrics, ...]
    confusion: np.ndarray  # (n_classes, n_classes), rows = true label
    n_eval: int


def _midranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties replaced by the mean rank of the tie group."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    s = scores[order]
    while i < scores.size:
        j = i
        while j < scores.size and s[j] == s[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * ((i + 1) + j)
        i = j
    return ranks


def auc_binary(scores, positives) -> float:
    """Mann-Whitney AUC of `scores` against the boolean positive mask."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs at least one positive and one negative")
    ranks = _midranks(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _f1(precision: float, recall: float) -> float:
    denom = precision + recall
    return 2.0 * precision * recall / denom if denom > 0 else 0.0


def compute_metrics(probs, labels, class_names) -> MetricsReport:
    """Metrics from predicted class probabilities and integer labels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValidationError("probs and labels must align")
    if labels.size == 0:
        raise ValidationError("empty evaluation split")
    n_classes = probs.shape[1]
    preds = probs.argmax(axis=1)

    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    accuracy = float(np.trace(confusion) / labels.size)

    per_class = []
    macro_p, macro_r = [], []
    for c in range(n_classes):
        support = int(confusion[c].sum())
        predicted = int(confusion[:, c].sum())
        if support == 0:
            log.warning("class %s absent from split; excluded from macro averages", class_names[c])
            continue
        precision = confusion[c, c] / predicted if predicted > 0 else 0.0
        recall = confusion[c, c] / support
        per_class.append(
            ClassMetrics(c, class_names[c], float(precision), float(recall), _f1(precision, recall), support)
        )
        macro_p.append(precision)
        macro_r.append(recall)

    precision = float(np.mean(macro_p))
    recall = float(np.mean(macro_r))

    if n_classes == 2:
        try:
            auc = auc_binary(probs[:, 1], labels == 1)
        except ValidationError:
            log.warning("AUC undefined: split has a single class")
            auc = float("nan")
    else:
        aucs = []
        for c in range(n_classes):
            mask = labels == c
            if 0 < mask.sum() < labels.size:
                aucs.append(auc_binary(probs[:, c], mask))
        auc = float(np.mean(aucs)) if aucs else float("nan")

    return MetricsReport(
        accuracy=accuracy,
        auc=auc,
        precision=precision,
        recall=recall,
        f1=_f1(precision, recall),
        per_class=tuple(per_class),
        confusion=confusion,
        n_eval=int(labels.size),
    )


def evaluate(model: AmilModel, dataset: Dataset, split: str) -> MetricsReport:
    """Evaluate the model on one split of the dataset."""
    idx = dataset.indices(split)
    if idx.size == 0:
        raise ValidationError(f"split {split!r} is empty")
    bags = [dataset.representations[i] for i in idx]
    labels = np.asarray(dataset.labels)[idx]
    probs = predict_proba(model, bags)
    return compute_metrics(probs, labels, dataset.class_names)
