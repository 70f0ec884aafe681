"""Diagonal Gaussian latents and the rules for combining per-modality experts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from ..numkit import Rng, Tensor, as_tensor, clamp, exp, log, tsum

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


@dataclass
class GaussianLatent:
    """``N(mean, diag(exp(logvar)))``; leading axes are batch axes."""

    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.logvar = clamp(as_tensor(self.logvar), LOGVAR_MIN, LOGVAR_MAX)
        if self.mean.shape != self.logvar.shape:
            raise ValueError("mean and logvar shapes differ")

    @classmethod
    def standard(cls, shape) -> "GaussianLatent":
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.logvar.data)

    @property
    def precision(self) -> np.ndarray:
        return np.exp(-self.logvar.data)

    def log_density(self, z) -> np.ndarray:
        """Log pdf summed over the last axis (no gradient)."""
        z = np.asarray(z, dtype=np.float64)
        mu, lv = self.mean.data, self.logvar.data
        return -0.5 * np.sum(np.log(2 * np.pi) + lv + (z - mu) ** 2 / np.exp(lv), axis=-1)

    def sample(self, rng: Rng, n: int | None = None) -> np.ndarray:
        shape = self.mean.shape if n is None else (n,) + self.mean.shape
        return self.mean.data + np.exp(0.5 * self.logvar.data) * rng.normal(shape)


def poe_combine(experts: Sequence[GaussianLatent | None], include_prior: bool = True,
                shape=None) -> GaussianLatent:
    """Precision-weighted product of Gaussian experts.

    ``None`` entries are missing modalities and contribute nothing. With
    ``include_prior`` a standard-normal expert (precision 1, mean 0) is added.
    ``shape`` sizes the result when every expert is missing.
    """
    present = [e for e in experts if e is not None]
    if not present:
        if not include_prior:
            raise ValueError("poe_combine needs at least one expert or the prior")
        if shape is None:
            raise ValueError("shape is required when all experts are missing")
        return GaussianLatent.standard(shape)
    precisions = [exp(-1.0 * e.logvar) for e in present]
    total = precisions[0]
    weighted = precisions[0] * present[0].mean
    for T, e in zip(precisions[1:], present[1:]):
        total = total + T
        weighted = weighted + T * e.mean
    if include_prior:
        total = total + 1.0
    return GaussianLatent(weighted / total, -1.0 * log(total))


class MixtureLatent:
    """Uniform mixture of the present experts."""

    def __init__(self, experts: Sequence[GaussianLatent]):
        if not experts:
            raise ValueError("mixture needs at least one present expert")
        self.experts = list(experts)

    def __len__(self) -> int:
        return len(self.experts)

    def sample(self, rng: Rng, n: int | None = None) -> np.ndarray:
        """Pick a component uniformly per draw, then sample it."""
        k = len(self.experts)
        if n is None:
            return self.experts[int(rng.integers(0, k))].sample(rng)
        picks = rng.integers(0, k, shape=n)
        draws = np.stack([e.sample(rng, n) for e in self.experts])
        return draws[picks, np.arange(n)]

    def log_density(self, z) -> np.ndarray:
        comps = np.stack([e.log_density(z) for e in self.experts])
        return logsumexp(comps, axis=0) - np.log(len(self.experts))

    @property
    def mean(self) -> np.ndarray:
        return np.mean([e.mean.data for e in self.experts], axis=0)


def moe_combine(experts: Sequence[GaussianLatent | None]) -> MixtureLatent:
    """Missing experts (``None``) get zero weight; the rest share it equally."""
    return MixtureLatent([e for e in experts if e is not None])


def reparam_sample(q: GaussianLatent, rng: Rng | None = None, eps: np.ndarray | None = None) -> Tensor:
    """``mean + exp(logvar / 2) * eps``; pass ``eps`` to freeze the noise."""
    if eps is None:
        eps = rng.normal(q.mean.shape)
    return q.mean + exp(0.5 * q.logvar) * eps


def kl_to_standard_normal(q: GaussianLatent) -> Tensor:
    """Closed-form ``KL(q || N(0, I))`` summed over the last axis."""
    per_dim = 0.5 * (q.mean * q.mean + exp(q.logvar) - 1.0 - q.logvar)
    return tsum(per_dim, axis=-1)
