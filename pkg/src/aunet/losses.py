"""Offset-stabilized multi-label cross entropy.

Plain log loss explodes as a sigmoid output approaches the wrong extreme.
Shifting both branches by a small offset bounds every term:

    Loss = -sum( l * log((p + 0.05) / 1.05) + (1 - l) * log((1.05 - p) / 1.05) )

Each term is 0 at p == l and peaks at log(21) ~ 3.0445 at the opposite
extreme, and the derivative stays finite on the whole closed interval
[0, 1], so training never stops on a saturated unit.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

OFFSET = 0.05
SCALE = 1.0 + OFFSET
MAX_TERM = float(np.log(SCALE / OFFSET))  # log(21), the per-entry ceiling


def offset_cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Summed offset log loss of predicted probabilities against binary labels.

    The returned scalar is the plain sum over all entries; divide by
    ``probs.size`` when reporting a per-entry mean. Gradients flow through
    ``probs`` only.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if probs.data.shape != labels.shape:
        raise ValueError(f"probs shape {probs.data.shape} != labels shape {labels.shape}")
    if ((labels != 0.0) & (labels != 1.0)).any():
        raise ValueError("labels must be binary 0/1")
    if (probs.data < 0.0).any() or (probs.data > 1.0).any():
        bad = probs.data[(probs.data < 0.0) | (probs.data > 1.0)].flat[0]
        raise ValueError(f"probabilities must lie in [0, 1], found {bad}")
    pos = ((probs + OFFSET) * (1.0 / SCALE)).log()
    neg = ((-probs + SCALE) * (1.0 / SCALE)).log()
    return -(Tensor(labels) * pos + Tensor(1.0 - labels) * neg).sum()


def mean_loss(loss_sum: Tensor, entry_count: int) -> float:
    """Per-entry mean of a summed loss, for logging and reporting."""
    return loss_sum.item() / entry_count
