"""ELBO objective and the stage-one minibatch training loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..numkit import Adam, NonFiniteError, Rng, Tensor, backward, clip_grad_norm, no_grad, square, tsum
from .model import MissingModalityError, MvaeModel
from .posterior import kl_to_standard_normal, poe_combine, reparam_sample

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Epoch loss stayed above 10x its initial value for three epochs."""


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 3e-3
    kl_scale: float = 0.1
    seed: int = 0
    posterior_mode: str = "joint"
    modality_dropout_prob: float = 0.5
    grad_clip: float = 10.0
    # cosine decay to this fraction of learning_rate by the last epoch; 1.0 disables it
    lr_final_fraction: float = 0.05
    # exponential moving average of the weights, per step; 0 disables it
    ema_decay: float = 0.995

    def __post_init__(self):
        if self.kl_scale < 0:
            raise ValueError("kl_scale must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.modality_dropout_prob <= 1.0:
            raise ValueError("modality_dropout_prob must be in [0, 1]")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if not 0.0 < self.lr_final_fraction <= 1.0:
            raise ValueError("lr_final_fraction must be in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for ``epoch`` (counted from the start of this run)."""
        if self.epochs <= 1:
            return self.learning_rate
        frac = self.lr_final_fraction
        cos = 0.5 * (1.0 + np.cos(np.pi * min(epoch, self.epochs - 1) / (self.epochs - 1)))
        return self.learning_rate * (frac + (1.0 - frac) * cos)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: MvaeModel
    history: list[float]
    optimizer: Adam
    epochs_done: int = 0
    step_history: list[float] = field(default_factory=list)


def _recon(model: MvaeModel, z: Tensor, batch: Sequence[np.ndarray]) -> Tensor:
    total = None
    for m, x in enumerate(batch):
        err = tsum(square(model.decode(z, m) - x), axis=-1)
        total = err if total is None else total + err
    return total


def elbo_loss(model: MvaeModel, batch: Sequence[np.ndarray], rng: Rng | None = None, beta: float = 1.0,
              present: Sequence[bool] | None = None, eps: Sequence[np.ndarray] | None = None) -> Tensor:
    """Negative ELBO averaged over the batch.

    ``batch[m]`` holds full modality-``m`` signals, shape ``(B, N_m)``. ``present``
    selects which modalities feed the encoder side (all are reconstructed).
    ``eps`` freezes the reparameterisation noise; for ``moe`` it holds one
    array per present expert.
    """
    batch = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in batch]
    M = model.n_modalities
    if len(batch) != M:
        raise ValueError("batch needs one array per modality")
    present = [True] * M if present is None else list(present)
    if not any(present):
        raise ValueError("at least one modality must be present")
    B = batch[0].shape[0]
    shape = (B, model.latent_dim)

    def noise(i):
        return eps[i] if eps is not None else rng.normal(shape)

    mode = model.posterior_mode
    if mode == "joint":
        if not all(present):
            raise MissingModalityError("joint encoder requires all modalities to be present")
        q = model.encode_joint(batch)
        z = reparam_sample(q, eps=noise(0))
        per_sample = _recon(model, z, batch) + beta * kl_to_standard_normal(q)
    elif mode == "poe":
        experts = [model.encode(x, m) if present[m] else None for m, x in enumerate(batch)]
        q = poe_combine(experts, include_prior=True, shape=shape)
        z = reparam_sample(q, eps=noise(0))
        per_sample = _recon(model, z, batch) + beta * kl_to_standard_normal(q)
    else:
        # Stratified over present experts; KL of the uniform mixture is bounded
        # above by the mean of the expert KLs (convexity), keeping it closed-form.
        experts = [model.encode(x, m) for m, x in enumerate(batch) if present[m]]
        k = len(experts)
        per_sample = None
        for i, q in enumerate(experts):
            z = reparam_sample(q, eps=noise(i))
            term = (_recon(model, z, batch) + beta * kl_to_standard_normal(q)) * (1.0 / k)
            per_sample = term if per_sample is None else per_sample + term
    loss = per_sample.mean()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("ELBO loss is not finite")
    return loss


def _dropout_mask(rng: Rng, M: int, p: float) -> list[bool]:
    keep = rng.uniform(M) >= p
    if not keep.any():
        keep[int(rng.integers(0, M))] = True
    return keep.tolist()


def train(model: MvaeModel, data, config: TrainConfig, optimizer: Adam | None = None,
          start_epoch: int = 0) -> TrainResult:
    """Minibatch Adam on :func:`elbo_loss` over the training split.

    ``data`` is either a :class:`~latentfuse.protein_synth.ProteinDataset`
    (its train split is used) or a sequence of per-modality arrays.
    ``history`` holds the full-split loss after each epoch, evaluated with one
    fixed noise draw so successive entries are comparable; ``step_history``
    holds the raw minibatch losses. With ``ema_decay > 0`` the epoch losses are
    measured at the averaged weights, and the model keeps them at the end.
    Passing a previous ``optimizer`` resumes its step counter and moments; the
    learning-rate schedule restarts with each call.
    """
    if config.posterior_mode != model.posterior_mode:
        raise ValueError("config.posterior_mode does not match the model")
    xs = _train_arrays(data)
    n = xs[0].shape[0]
    if n == 0:
        raise ValueError("training split is empty")
    params = model.parameters()
    opt = optimizer if optimizer is not None else Adam(params, lr=config.learning_rate)
    rng = Rng(config.seed).child("train")
    eval_rng = Rng(config.seed).child("epoch-eval")
    history: list[float] = []
    step_history: list[float] = []
    initial = None
    above = 0
    ema = [p.data.copy() for p in params] if config.ema_decay > 0 else None
    for epoch in range(start_epoch, start_epoch + config.epochs):
        erng = rng.child(epoch)
        opt.lr = config.lr_at(epoch - start_epoch)
        order = erng.child("perm").permutation(n)
        drop_rng = erng.child("dropout")
        noise_rng = erng.child("noise")
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [x[idx] for x in xs]
            present = None
            if model.posterior_mode == "poe" and config.modality_dropout_prob > 0:
                present = _dropout_mask(drop_rng, model.n_modalities, config.modality_dropout_prob)
            opt.zero_grad()
            loss = elbo_loss(model, batch, noise_rng, config.kl_scale, present)
            backward(loss)
            clip_grad_norm(params, config.grad_clip)
            opt.step()
            if ema is not None:
                for a, p in zip(ema, params):
                    a *= config.ema_decay
                    a += (1.0 - config.ema_decay) * p.data
            step_history.append(float(loss.data))
        if ema is None:
            epoch_loss = _epoch_loss(model, xs, config, eval_rng)
        else:
            live = _swap(params, ema)
            epoch_loss = _epoch_loss(model, xs, config, eval_rng)
            ema = _swap(params, live)
        history.append(epoch_loss)
        if initial is None:
            initial = epoch_loss
        above = above + 1 if epoch_loss > 10 * initial else 0
        if above >= 3:
            raise TrainingDivergedError(f"loss {epoch_loss:.4g} > 10x initial {initial:.4g} for 3 epochs")
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
    if ema is not None:
        _swap(params, ema)
    return TrainResult(model, history, opt, start_epoch + config.epochs, step_history)


def _swap(params, values) -> list[np.ndarray]:
    old = [p.data for p in params]
    for p, v in zip(params, values):
        p.data = v
    return old


def _epoch_loss(model, xs, config, rng, chunk: int = 2000) -> float:
    n = xs[0].shape[0]
    total = 0.0
    with no_grad():
        for start in range(0, n, chunk):
            part = [x[start:start + chunk] for x in xs]
            total += float(elbo_loss(model, part, rng.child(start), config.kl_scale).data) * len(part[0])
    return total / n


def _train_arrays(data) -> list[np.ndarray]:
    if hasattr(data, "train") and hasattr(data, "x"):
        tr = data.train()
        return [tr.x[m] for m in range(tr.n_modalities)]
    return [np.asarray(x, dtype=np.float64) for x in data]


def evaluate_loss(model: MvaeModel, xs: Sequence[np.ndarray], beta: float = 1.0, seed: int = 0) -> float:
    """ELBO loss on fixed data with a fixed noise stream (no gradient)."""
    with no_grad():
        return float(elbo_loss(model, xs, Rng(seed).child("eval"), beta).data)


def reconstruction_mse(model: MvaeModel, xs: Sequence[np.ndarray]) -> list[float]:
    """Per-element MSE of ``decode(posterior mean)`` per modality."""
    z = model.posterior_mean(list(xs))
    recon = model.reconstruct(z)
    return [float(np.mean((r - x) ** 2)) for r, x in zip(recon, xs)]
