"""K-nearest-neighbour classification in the latent space."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class LabeledLatent:
    z: np.ndarray
    label: int

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        if not np.isfinite(z).all():
            raise ValueError("latent must be finite")
        object.__setattr__(self, "z", z)


def _vote(dists: np.ndarray, labels: np.ndarray) -> int:
    # majority, then smallest mean distance, then lowest label
    best = None
    for lab in np.unique(labels):
        sel = labels == lab
        key = (-int(sel.sum()), float(dists[sel].mean()), int(lab))
        if best is None or key < best:
            best = key
    return best[2]


def knn_predict(queries: np.ndarray, support_z: np.ndarray, support_labels: np.ndarray, k: int) -> np.ndarray:
    """Vectorised K-NN over a batch of queries (Euclidean distance)."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    support_z = np.atleast_2d(np.asarray(support_z, dtype=np.float64))
    support_labels = np.asarray(support_labels, dtype=np.int64)
    n = len(support_labels)
    if n == 0:
        raise ValueError("support set is empty")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    dists = np.linalg.norm(queries[:, None, :] - support_z[None, :, :], axis=-1)
    # stable sort: equal distances resolve to the earlier support point
    nearest = np.argsort(dists, axis=1, kind="stable")[:, :k]
    out = np.empty(len(queries), dtype=np.int64)
    for i, idx in enumerate(nearest):
        out[i] = _vote(dists[i, idx], support_labels[idx])
    return out


def knn_classify(query, support: Sequence[LabeledLatent], k: int) -> int:
    if not support:
        raise ValueError("support set is empty")
    z = np.stack([s.z for s in support])
    labels = np.array([s.label for s in support])
    return int(knn_predict(np.asarray(query)[None, :], z, labels, k)[0])
