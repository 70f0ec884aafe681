"""Classification and reconstruction metrics."""

from __future__ import annotations

import numpy as np


def f1_macro(predictions, truths, n_classes: int) -> float:
    """Unweighted mean of per-class F1; classes with ``P + R = 0`` score 0."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truths, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError("predictions and truths must have equal length")
    scores = np.zeros(n_classes)
    for c in range(n_classes):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        if precision + recall > 0:
            scores[c] = 2 * precision * recall / (precision + recall)
    return float(scores.mean())


def recon_error(x_hat, x) -> float:
    """Per-element mean squared error."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch {x_hat.shape} vs {x.shape}")
    return float(np.mean((x_hat - x) ** 2))
