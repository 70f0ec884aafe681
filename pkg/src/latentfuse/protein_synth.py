"""Synthetic two-modality "toy protein" data.

A 10-component Gaussian mixture in R^4 provides the latent cause ``z``; each
modality is a random one-layer tanh MLP ``x_m = tanh(W_m z + b_m)`` in R^N.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import Rng

N_COMPONENTS = 10
LATENT_DIM = 4

MAGIC = b"LFPD"
FORMAT_VERSION = 1
# magic, version, n_samples, N, latent_dim, n_modalities
_HEADER = struct.Struct("<4sIIIII")


class DatasetFormatError(ValueError):
    """Malformed, truncated, or version-mismatched dataset file."""


@dataclass
class GmmPrior:
    means: np.ndarray
    weights: np.ndarray
    component_std: float = 0.5

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.component_std <= 0:
            raise ValueError("component_std must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ValueError("weights must lie on the simplex")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.means.shape[1]

    def min_pairwise_distance(self) -> float:
        d = np.linalg.norm(self.means[:, None, :] - self.means[None, :, :], axis=-1)
        return float(d[np.triu_indices(self.n_components, k=1)].min())


@dataclass
class TrueGenerator:
    """Ground-truth per-modality maps ``z -> tanh(W z + b)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    @property
    def n_modalities(self) -> int:
        return len(self.weights)

    @property
    def signal_dim(self) -> int:
        return self.weights[0].shape[0]

    def __call__(self, z: np.ndarray, m: int) -> np.ndarray:
        pre = np.asarray(z) @ self.weights[m].T + self.biases[m]
        if self.activation == "tanh":
            return np.tanh(pre)
        if self.activation == "linear":
            return pre
        raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class ProteinDataset:
    """Column-oriented sample store.

    ``x`` has shape ``(n_modalities, n_samples, N)``; ``is_train`` marks the
    80% training split.
    """

    x: np.ndarray
    labels: np.ndarray
    z_true: np.ndarray
    is_train: np.ndarray
    sample_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.z_true = np.asarray(self.z_true, dtype=np.float64)
        self.is_train = np.asarray(self.is_train, dtype=bool)
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.labels), dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        n = len(self.labels)
        if self.x.ndim != 3 or self.x.shape[1] != n or self.z_true.shape[0] != n or self.is_train.shape != (n,):
            raise ValueError("inconsistent dataset shapes")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_modalities(self) -> int:
        return self.x.shape[0]

    @property
    def signal_dim(self) -> int:
        return self.x.shape[2]

    @property
    def latent_dim(self) -> int:
        return self.z_true.shape[1]

    def subset(self, idx) -> "ProteinDataset":
        idx = np.asarray(idx)
        return ProteinDataset(
            self.x[:, idx], self.labels[idx], self.z_true[idx], self.is_train[idx], self.sample_ids[idx]
        )

    def train(self) -> "ProteinDataset":
        return self.subset(np.flatnonzero(self.is_train))

    def test(self) -> "ProteinDataset":
        return self.subset(np.flatnonzero(~self.is_train))

    def modality(self, m: int) -> np.ndarray:
        return self.x[m]


def build_prior(rng: Rng, spread: float = 2.0, component_std: float = 0.5,
                n_components: int = N_COMPONENTS, latent_dim: int = LATENT_DIM,
                redraw: bool = True, max_redraws: int = 100) -> GmmPrior:
    """Means i.i.d. ``N(0, spread^2 I)``, uniform weights.

    With ``redraw`` the means are re-sampled until every pair is further than
    ``2 * component_std`` apart. ``spread=0`` is accepted and never redrawn.
    """
    if spread < 0:
        raise ValueError("spread must be non-negative")
    weights = np.full(n_components, 1.0 / n_components)
    for _ in range(max_redraws if (redraw and spread > 0) else 1):
        prior = GmmPrior(rng.normal((n_components, latent_dim), std=spread), weights, component_std)
        if prior.min_pairwise_distance() > 2 * component_std:
            break
    return prior


def build_generators(rng: Rng, signal_dim: int = 32, latent_dim: int = LATENT_DIM, n_modalities: int = 2,
                     weight_std: float = 0.25, bias_std: float = 0.1, activation: str = "tanh") -> TrueGenerator:
    weights, biases = [], []
    for m in range(n_modalities):
        r = rng.child(m)
        weights.append(r.normal((signal_dim, latent_dim), std=weight_std))
        biases.append(r.normal((signal_dim,), std=bias_std))
    return TrueGenerator(weights, biases, activation)


def sample_dataset(prior: GmmPrior, gens: TrueGenerator, n_samples: int, rng: Rng,
                   train_fraction: float = 0.8) -> ProteinDataset:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    labels = rng.child("component").gen.choice(prior.n_components, size=n_samples, p=prior.weights)
    z = prior.means[labels] + rng.child("latent").normal((n_samples, prior.latent_dim), std=prior.component_std)
    x = np.stack([gens(z, m) for m in range(gens.n_modalities)])
    n_train = int(round(train_fraction * n_samples))
    is_train = np.zeros(n_samples, dtype=bool)
    is_train[rng.child("split").permutation(n_samples)[:n_train]] = True
    return ProteinDataset(x, labels, z, is_train)


def make_toy_dataset(seed: int = 0, n_samples: int = 10_000, signal_dim: int = 32, spread: float = 2.0,
                     component_std: float = 0.5, weight_std: float = 0.25, bias_std: float = 0.1):
    """Convenience wrapper returning ``(dataset, prior, generators)`` from one seed."""
    root = Rng(seed)
    prior = build_prior(root.child("prior"), spread, component_std)
    gens = build_generators(root.child("generators"), signal_dim, prior.latent_dim,
                            weight_std=weight_std, bias_std=bias_std)
    data = sample_dataset(prior, gens, n_samples, root.child("samples"))
    return data, prior, gens


def render_protein(x) -> np.ndarray:
    """Pair consecutive values into 2D polyline vertices, shape ``(N/2, 2)``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size % 2:
        raise ValueError("render_protein needs an even-length signal")
    return x.reshape(-1, 2)


# -- persistence -------------------------------------------------------------
def save_dataset(data: ProteinDataset, path) -> None:
    """Little-endian binary container: header, then row-major payload blocks.

    Payload order: sample_ids int64[n], labels int64[n], is_train uint8[n],
    z_true float64[n, d], x float64[M, n, N].
    """
    path = Path(path)
    n = len(data)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, n, data.signal_dim, data.latent_dim, data.n_modalities)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.sample_ids.astype("<i8").tobytes())
        fh.write(data.labels.astype("<i8").tobytes())
        fh.write(data.is_train.astype(np.uint8).tobytes())
        fh.write(data.z_true.astype("<f8").tobytes())
        fh.write(data.x.astype("<f8").tobytes())


def load_dataset(path) -> ProteinDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("file too short for header")
    magic, version, n, N, d, M = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    expected = _HEADER.size + n * (8 + 8 + 1) + 8 * n * d + 8 * M * n * N
    if len(raw) != expected:
        raise DatasetFormatError(f"payload size {len(raw)} != expected {expected}")
    off = _HEADER.size

    def take(dtype, count, shape):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        return arr.astype(dtype.lstrip("<"), copy=True) if dtype != "u1" else arr.copy()

    ids = take("<i8", n, (n,))
    labels = take("<i8", n, (n,))
    is_train = take("u1", n, (n,)).astype(bool)
    z = take("<f8", n * d, (n, d))
    x = take("<f8", M * n * N, (M, n, N))
    return ProteinDataset(x, labels, z, is_train, ids)


def csv_header(latent_dim: int, signal_dim: int, n_modalities: int) -> list[str]:
    cols = ["sample_id", "split", "label"] + [f"z_true[{i}]" for i in range(latent_dim)]
    for m in range(n_modalities):
        cols += [f"x{m + 1}[{i}]" for i in range(signal_dim)]
    return cols


def save_dataset_csv(data: ProteinDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(csv_header(data.latent_dim, data.signal_dim, data.n_modalities))
        for i in range(len(data)):
            row = [int(data.sample_ids[i]), "train" if data.is_train[i] else "test", int(data.labels[i])]
            row += [repr(float(v)) for v in data.z_true[i]]
            for m in range(data.n_modalities):
                row += [repr(float(v)) for v in data.x[m, i]]
            w.writerow(row)


def load_dataset_csv(path) -> ProteinDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError("empty CSV") from None
        d = sum(c.startswith("z_true[") for c in header)
        mods = sorted({c.split("[")[0] for c in header if c.startswith("x")})
        N = sum(c.startswith("x1[") for c in header)
        if header != csv_header(d, N, len(mods)):
            raise DatasetFormatError("unexpected CSV columns")
        rows = list(reader)
    if any(len(r) != len(header) for r in rows):
        raise DatasetFormatError("ragged CSV row")
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    is_train = np.array([r[1] == "train" for r in rows])
    labels = np.array([int(r[2]) for r in rows], dtype=np.int64)
    vals = np.array([[float(v) for v in r[3:]] for r in rows], dtype=np.float64).reshape(len(rows), -1)
    z = vals[:, :d]
    x = np.stack([vals[:, d + m * N: d + (m + 1) * N] for m in range(len(mods))])
    return ProteinDataset(x, labels, z, is_train, ids)
