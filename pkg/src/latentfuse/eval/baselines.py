"""Supervised comparison models: single modality, product-rule fusion, dual-branch fusion.

Every trunk mirrors the VAE encoder's first layer (``N -> 16``, tanh); the
classification head replaces the encoder's output layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..numkit import Adam, Linear, Rng, Tensor, backward, concat, log_softmax, no_grad, tanh

BASELINE_KINDS = ("single_modality_1", "single_modality_2", "probability_fusion", "dual_branch")


@dataclass
class BaselineConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    beta1: float = 0.95
    hidden: int = 16
    seed: int = 0


class _Classifier:
    """Trunk(s) plus a linear head producing class logits."""

    def __init__(self, input_dims: Sequence[int], n_classes: int, hidden: int, rng: Rng):
        self.trunks = [Linear(n, hidden, rng.child(f"trunk{i}")) for i, n in enumerate(input_dims)]
        self.head = Linear(hidden * len(input_dims), n_classes, rng.child("head"))

    def parameters(self):
        return [p for t in self.trunks for p in t.parameters()] + self.head.parameters()

    def logits(self, xs: Sequence[np.ndarray]) -> Tensor:
        feats = [tanh(t(Tensor(x))) for t, x in zip(self.trunks, xs)]
        h = feats[0] if len(feats) == 1 else concat(feats, axis=-1)
        return self.head(h)

    def proba(self, xs) -> np.ndarray:
        with no_grad():
            return np.exp(log_softmax(self.logits(xs), axis=-1).data)


def _fit(clf: _Classifier, xs: Sequence[np.ndarray], y: np.ndarray, n_classes: int, cfg: BaselineConfig,
         rng: Rng) -> list[float]:
    params = clf.parameters()
    opt = Adam(params, lr=cfg.learning_rate, beta1=cfg.beta1, weight_decay=cfg.weight_decay)
    onehot = np.eye(n_classes)[y]
    n = len(y)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.child(epoch).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            lp = log_softmax(clf.logits([x[idx] for x in xs]), axis=-1)
            loss = -1.0 * (lp * onehot[idx]).sum() * (1.0 / len(idx))
            backward(loss)
            opt.step()
            total += float(loss.data) * len(idx)
        history.append(total / n)
    return history


@dataclass
class BaselineModel:
    kind: str
    n_classes: int
    classifiers: list[_Classifier]
    modalities: list[list[int]]
    history: list[list[float]] = field(default_factory=list)

    def predict_proba(self, xs: Sequence[np.ndarray]) -> np.ndarray:
        """Class probabilities; ``xs[m]`` holds modality ``m`` as ``(B, N)``."""
        if self.kind == "probability_fusion":
            return fuse_probabilities([c.proba([xs[m] for m in mods]) for c, mods in zip(self.classifiers, self.modalities)])
        clf, mods = self.classifiers[0], self.modalities[0]
        return clf.proba([xs[m] for m in mods])

    def predict(self, xs: Sequence[np.ndarray]) -> np.ndarray:
        return np.argmax(self.predict_proba(xs), axis=-1)


def fuse_probabilities(probas: Sequence[np.ndarray]) -> np.ndarray:
    """Product rule: elementwise product of per-modality class probabilities, renormalised."""
    out = np.ones_like(probas[0])
    for p in probas:
        out = out * p
    total = out.sum(axis=-1, keepdims=True)
    return out / np.where(total > 0, total, 1.0)


def train_baseline(kind: str, xs: Sequence[np.ndarray], labels, n_classes: int = 10,
                   config: BaselineConfig | None = None) -> BaselineModel:
    """Fit a supervised baseline on labelled signals ``xs[m]`` (``(n, N_m)``)."""
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline {kind!r}")
    cfg = config or BaselineConfig()
    y = np.asarray(labels, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("no labelled samples")
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    rng = Rng(cfg.seed).child(kind)
    dims = [x.shape[1] for x in xs]
    if kind == "single_modality_1":
        groups = [[0]]
    elif kind == "single_modality_2":
        groups = [[1]]
    elif kind == "probability_fusion":
        groups = [[0], [1]]
    else:
        groups = [[0, 1]]
    classifiers, history = [], []
    for g, mods in enumerate(groups):
        clf = _Classifier([dims[m] for m in mods], n_classes, cfg.hidden, rng.child(f"init{g}"))
        history.append(_fit(clf, [xs[m] for m in mods], y, n_classes, cfg, rng.child(f"fit{g}")))
        classifiers.append(clf)
    return BaselineModel(kind, n_classes, classifiers, groups, history)
