"""Multimodal VAE: per-modality MLP encoders/decoders and posterior construction."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from ..numkit import MLP, Rng, Tensor, as_tensor, no_grad
from .posterior import GaussianLatent, MixtureLatent, moe_combine, poe_combine

log = logging.getLogger(__name__)

POSTERIOR_MODES = ("joint", "poe", "moe")


class MissingModalityError(ValueError):
    """A joint-encoder model was asked to encode without every modality."""


class MvaeModel:
    """Encoders ``phi_m``, decoders ``psi_m`` and a posterior-combination mode.

    ``joint`` uses one encoder over the concatenated modalities; ``poe`` and
    ``moe`` use one encoder per modality. Decoders are always per modality and
    deterministic.
    """

    def __init__(self, signal_dims: Sequence[int], latent_dim: int = 4, hidden: int = 16,
                 posterior_mode: str = "joint", seed: int = 0, decoder_output: str = "tanh"):
        if posterior_mode not in POSTERIOR_MODES:
            raise ValueError(f"posterior_mode must be one of {POSTERIOR_MODES}")
        self.signal_dims = [int(n) for n in signal_dims]
        self.latent_dim = int(latent_dim)
        self.hidden = int(hidden)
        self.posterior_mode = posterior_mode
        self.seed = int(seed)
        self.decoder_output = decoder_output
        rng = Rng(seed).child("mvae-init")
        d = self.latent_dim
        if posterior_mode == "joint":
            self.encoders = [MLP(sum(self.signal_dims), hidden, 2 * d, rng.child("enc-joint"))]
        else:
            self.encoders = [MLP(n, hidden, 2 * d, rng.child(f"enc{m}")) for m, n in enumerate(self.signal_dims)]
        self.decoders = [MLP(d, hidden, n, rng.child(f"dec{m}"), decoder_output)
                         for m, n in enumerate(self.signal_dims)]
        log.info("MvaeModel(%s) with %d parameters", posterior_mode, self.n_parameters())

    @property
    def n_modalities(self) -> int:
        return len(self.signal_dims)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, nets in (("enc", self.encoders), ("dec", self.decoders)):
            for i, net in enumerate(nets):
                for layer in ("hidden", "out"):
                    lin = getattr(net, layer)
                    out[f"{prefix}{i}.{layer}.W"] = lin.W
                    out[f"{prefix}{i}.{layer}.b"] = lin.b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def decoder_parameters(self) -> list[Tensor]:
        return [p for dec in self.decoders for p in dec.parameters()]

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    # -- encoders -------------------------------------------------------------
    def _split(self, h: Tensor) -> GaussianLatent:
        d = self.latent_dim
        if h.ndim == 1:
            return GaussianLatent(h[:d], h[d:])
        return GaussianLatent(h[:, :d], h[:, d:])

    def _check_x(self, x, m: int) -> Tensor:
        if not 0 <= m < self.n_modalities:
            raise IndexError(f"modality {m} out of range")
        x = as_tensor(x)
        if x.shape[-1] != self.signal_dims[m]:
            raise ValueError(f"modality {m} expects length {self.signal_dims[m]}, got {x.shape[-1]}")
        return x

    def encode(self, x, m: int) -> GaussianLatent:
        """Unimodal expert ``q(z | x_m)``; only defined for ``poe``/``moe`` models."""
        if self.posterior_mode == "joint":
            raise MissingModalityError("joint-mode models have no unimodal encoders")
        x = self._check_x(x, m)
        return self._split(self.encoders[m](x))

    def encode_joint(self, xs: Sequence) -> GaussianLatent:
        if self.posterior_mode != "joint":
            raise ValueError("encode_joint requires posterior_mode='joint'")
        if len(xs) != self.n_modalities or any(x is None for x in xs):
            raise MissingModalityError("joint encoder requires all modalities to be present")
        xs = [self._check_x(x, m) for m, x in enumerate(xs)]
        axis = -1
        flat = np.concatenate([x.data for x in xs], axis=axis)
        return self._split(self.encoders[0](Tensor(flat)))

    def posterior(self, xs: Sequence) -> GaussianLatent | MixtureLatent:
        """Joint posterior given per-modality inputs; ``None`` marks a missing modality."""
        if len(xs) != self.n_modalities:
            raise ValueError("one entry per modality required (use None for missing)")
        if self.posterior_mode == "joint":
            return self.encode_joint(xs)
        experts = [None if x is None else self.encode(x, m) for m, x in enumerate(xs)]
        if self.posterior_mode == "poe":
            lead = next((np.shape(x)[:-1] for x in xs if x is not None), ())
            return poe_combine(experts, include_prior=True, shape=lead + (self.latent_dim,))
        return moe_combine(experts)

    def posterior_mean(self, xs: Sequence) -> np.ndarray:
        with no_grad():
            q = self.posterior(xs)
        return q.mean if isinstance(q, MixtureLatent) else q.mean.data

    # -- decoders -------------------------------------------------------------
    def decode(self, z, m: int) -> Tensor:
        return self.decoders[m](z)

    def reconstruct(self, z: np.ndarray) -> list[np.ndarray]:
        with no_grad():
            return [self.decode(Tensor(z), m).data for m in range(self.n_modalities)]
