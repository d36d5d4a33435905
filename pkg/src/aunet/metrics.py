"""Per-AU F1 scoring and subject-disjoint cross-validation folds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray


def confusion_per_label(predictions: np.ndarray, labels: np.ndarray) -> ConfusionCounts:
    predictions = np.asarray(predictions, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    if predictions.shape != labels.shape:
        raise ValueError(f"prediction shape {predictions.shape} != label shape {labels.shape}")
    tp = (predictions & labels).sum(axis=0)
    fp = (predictions & ~labels).sum(axis=0)
    fn = (~predictions & labels).sum(axis=0)
    tn = (~predictions & ~labels).sum(axis=0)
    return ConfusionCounts(tp, fp, fn, tn)


def f1_per_label(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5):
    """Per-column F1 of thresholded probabilities, plus the unweighted average.

    Degenerate columns follow the usual convention: a column with no
    positives anywhere (TP+FP+FN == 0) scores 1.0; a column with positives
    but zero true positives scores 0.0.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    probs = np.asarray(probs, dtype=np.float64)
    counts = confusion_per_label(probs >= threshold, labels)
    scores = np.empty(probs.shape[1])
    for j in range(probs.shape[1]):
        tp, fp, fn = counts.tp[j], counts.fp[j], counts.fn[j]
        if tp + fp + fn == 0:
            scores[j] = 1.0
        elif tp == 0:
            scores[j] = 0.0
        else:
            precision = tp / (tp + fp)
            recall = tp / (tp + fn)
            scores[j] = 2.0 * precision * recall / (precision + recall)
    return scores, float(scores.mean())


def subject_kfold_split(subject_ids: Sequence, k: int = 3, seed: int = 0) -> Dict:
    """Deterministic subject -> fold assignment; fold sizes differ by at most one.

    Unique subjects are sorted, shuffled by the seed, then dealt round-robin,
    so no subject's frames ever straddle a fold boundary.
    """
    subjects = sorted(set(subject_ids))
    if k > len(subjects):
        raise ValueError(f"cannot split {len(subjects)} subjects into {k} folds")
    if k < 1:
        raise ValueError("k must be positive")
    order = list(subjects)
    np.random.default_rng(seed).shuffle(order)
    return {subject: i % k for i, subject in enumerate(order)}


def fold_members(assignment: Dict, fold: int) -> list:
    return sorted(s for s, f in assignment.items() if f == fold)
