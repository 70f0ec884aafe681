"""Measurement operators mapping full signals to observations.

Every operator here is linear, ``y = A x``, optionally followed by additive
Gaussian noise when observations are generated. The noise is never part of the
differentiable forward map used by fusion.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .numkit import Rng, Tensor, matmul

SAMPLER_KINDS = ("random_projection", "mask", "identity")


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "identity"
    n_measurements: int | None = None
    missing_ratio: float | None = None
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.kind == "random_projection":
            if self.n_measurements is None or self.n_measurements < 1:
                raise ValueError("random_projection needs n_measurements >= 1")
        if self.kind == "mask":
            if self.missing_ratio is None or not 0.0 <= self.missing_ratio <= 1.0:
                raise ValueError("mask needs 0 <= missing_ratio <= 1")

    def validate_for(self, signal_dim: int) -> None:
        if self.kind == "random_projection" and self.n_measurements > signal_dim:
            raise ValueError(f"n_measurements={self.n_measurements} exceeds signal dimension {signal_dim}")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerSpec":
        unknown = set(d) - {"kind", "n_measurements", "missing_ratio", "noise_std", "seed"}
        if unknown:
            raise ValueError(f"unknown sampler keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Observation:
    y: np.ndarray
    spec: SamplerSpec
    sample_id: int | None = None


class Sampler:
    """A built, immutable measurement operator."""

    def __init__(self, spec: SamplerSpec, matrix: np.ndarray):
        self.spec = spec
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.matrix.setflags(write=False)
        self._At = Tensor(self.matrix.T)

    @property
    def signal_dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_out(self) -> int:
        return self.matrix.shape[0]

    @property
    def noise_std(self) -> float:
        return self.spec.noise_std

    def measure(self, x: np.ndarray) -> np.ndarray:
        """Noiseless ``A x`` for a signal or a ``(B, N)`` batch."""
        return np.asarray(x, dtype=np.float64) @ self.matrix.T

    def forward(self, x: Tensor) -> Tensor:
        """Differentiable noiseless map on a ``(B, N)`` tensor."""
        return matmul(x, self._At)

    def __call__(self, x):
        return self.forward(x) if isinstance(x, Tensor) else self.measure(x)

    def apply(self, x, rng: Rng | None = None, sample_id: int | None = None) -> Observation:
        """Generate an observation: ``A x`` plus ``noise_std`` Gaussian noise."""
        y = self.measure(x)
        if self.spec.noise_std > 0:
            if rng is None:
                raise ValueError("a noise stream is required when noise_std > 0")
            y = y + rng.normal(y.shape, std=self.spec.noise_std)
        return Observation(y, self.spec, sample_id)


def build_sampler(spec: SamplerSpec, signal_dim: int, rng: Rng | None = None) -> Sampler:
    """Build the operator matrix; ``rng`` defaults to a stream keyed by ``spec.seed``."""
    spec.validate_for(signal_dim)
    rng = rng if rng is not None else Rng(spec.seed).child("sampler")
    N = signal_dim
    if spec.kind == "identity":
        A = np.eye(N)
    elif spec.kind == "random_projection":
        A = rng.normal((spec.n_measurements, N), std=1.0 / math.sqrt(N))
    else:
        n_missing = math.ceil(spec.missing_ratio * N - 1e-9)
        keep = np.ones(N)
        keep[rng.permutation(N)[:n_missing]] = 0.0
        A = np.diag(keep)
    return Sampler(spec, A)


def lipschitz_check(sampler: Sampler, n_trials: int, rng: Rng) -> float:
    """Largest ``|chi(a) - chi(b)| / |a - b|`` over random pairs."""
    best = 0.0
    for _ in range(n_trials):
        a = rng.normal(sampler.signal_dim)
        b = rng.normal(sampler.signal_dim)
        ratio = np.linalg.norm(sampler.measure(a) - sampler.measure(b)) / np.linalg.norm(a - b)
        best = max(best, float(ratio))
    return best


def measurement_percentage(n_measurements: int, signal_dim: int) -> str:
    """Format ``n / N`` the way result tables label it: ``3.125%``, ``6.25%``, ``100%``."""
    text = f"{100.0 * n_measurements / signal_dim:.3f}".rstrip("0").rstrip(".")
    return f"{text}%"
