"""MAP estimation of the shared latent from (subsampled, noisy) multimodal observations.

The objective is

    L(z) = lambda_0 |z|^2 + sum_m lambda_m |y_m - chi_m(psi_m(z))|^2

with frozen decoders ``psi_m`` and known samplers ``chi_m``. Each sweep takes
``inner_steps`` gradient steps on every observed modality's term (plus the
prior term) in turn. Restarts begin from ``z0 ~ N(0, I)``.

All restarts of all samples are optimised together as rows of one ``(rows, d)``
tensor: the objective is a sum of per-row terms and both optimizers act
elementwise, so each row follows exactly the trajectory it would follow alone.
Rows that converge are frozen.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mvae import MissingModalityError, MixtureLatent, MvaeModel
from .numkit import NonFiniteError, Rng, Tensor, backward, make_optimizer, no_grad, square, tsum
from .samplers import Sampler, SamplerSpec, build_sampler

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["sample_id", "modality", "n_measurements", "noise_std", "recon_mse",
                   "final_loss", "restarts", "iterations"]


class FusionError(RuntimeError):
    """Every restart of a sample diverged."""


@dataclass
class FusionConfig:
    prior_weight: float = 0.1
    modality_weights: list[float] | None = None
    learning_rate: float | list[float] = 0.01
    optimizer: str = "adam"
    max_iters: int = 2000
    tol: float = 1e-8
    window: int = 50
    n_restarts: int = 10
    inner_steps: int = 1
    init: str = "prior"
    noise_floor: float = 0.05

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.prior_weight < 0:
            raise ValueError("prior_weight must be >= 0")
        if self.modality_weights is not None and any(w < 0 for w in self.modality_weights):
            raise ValueError("modality weights must be >= 0")
        lrs = self.learning_rate if isinstance(self.learning_rate, (list, tuple)) else [self.learning_rate]
        if any(lr <= 0 for lr in lrs):
            raise ValueError("learning rates must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.init not in ("prior", "impute"):
            raise ValueError("init must be 'prior' or 'impute'")
        if self.noise_floor <= 0:
            raise ValueError("noise_floor must be positive")

    def weights_for(self, samplers: Sequence[Sampler | None]) -> list[float]:
        """lambda_m: explicit, else ``1 / (2 max(sigma_m, noise_floor)^2)``.

        The floor stands in for decoder error on noiseless sensors, which keeps
        the data terms from swamping the prior when sigma is zero.
        """
        if self.modality_weights is not None:
            if len(self.modality_weights) != len(samplers):
                raise ValueError("one modality weight per modality required")
            return [float(w) for w in self.modality_weights]
        out = []
        for s in samplers:
            sigma = s.noise_std if s is not None else 0.0
            out.append(1.0 / (2.0 * max(sigma, self.noise_floor) ** 2))
        return out

    def lr_for(self, m: int) -> float:
        if isinstance(self.learning_rate, (list, tuple)):
            return float(self.learning_rate[m])
        return float(self.learning_rate)


@dataclass
class FusionResult:
    z_map: np.ndarray
    restart_losses: np.ndarray
    loss_trace: np.ndarray
    reconstructions: list[np.ndarray]
    converged: bool
    iterations: int
    winner: int
    sample_id: int | None = None
    restart_z: np.ndarray | None = field(default=None, repr=False)

    @property
    def final_loss(self) -> float:
        return float(self.restart_losses[self.winner])


def fusion_loss(z, observations: Sequence[np.ndarray | None], model: MvaeModel,
                samplers: Sequence[Sampler | None], prior_weight: float,
                modality_weights: Sequence[float], modalities: Sequence[int] | None = None) -> Tensor:
    """Differentiable objective summed over rows of ``z``.

    Missing observations (``None``) contribute nothing. ``modalities`` restricts
    the data terms to a subset (the prior term is always included).
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    loss = prior_weight * tsum(square(z))
    ms = range(len(observations)) if modalities is None else modalities
    for m in ms:
        y = observations[m]
        if y is None:
            continue
        pred = samplers[m].forward(model.decode(z if z.ndim == 2 else z.reshape(1, -1), m))
        y = np.asarray(y, dtype=np.float64).reshape(pred.shape)
        loss = loss + modality_weights[m] * tsum(square(pred - y))
    return loss


def _row_losses(z: np.ndarray, ys, model, samplers, lam0, lams) -> np.ndarray:
    with no_grad():
        out = lam0 * np.sum(z * z, axis=1)
        zt = Tensor(z)
        for m, y in enumerate(ys):
            if y is None:
                continue
            pred = samplers[m].forward(model.decode(zt, m)).data
            out = out + lams[m] * np.sum((y - pred) ** 2, axis=1)
    return out


def _initial_points(ys, model, samplers, config, rngs: Sequence[Rng]) -> np.ndarray:
    d = model.latent_dim
    R = config.n_restarts
    z0 = np.empty((len(rngs) * R, d))
    q = None
    if config.init == "impute":
        full = [y if (y is not None and s is not None and s.spec.kind == "identity") else None
                for y, s in zip(ys, samplers)]
        if any(f is not None for f in full):
            try:
                q = model.posterior(full) if model.posterior_mode != "joint" else model.encode_joint(full)
            except MissingModalityError:
                log.warning("joint encoder needs every modality fully observed; using prior init")
                q = None
    for b, rng in enumerate(rngs):
        for r in range(R):
            stream = rng.child(r)
            if q is None:
                z0[b * R + r] = stream.normal(d)
            elif isinstance(q, MixtureLatent):
                comps = MixtureLatent([_row(e, b) for e in q.experts])
                z0[b * R + r] = comps.sample(stream)
            else:
                z0[b * R + r] = _row(q, b).sample(stream)
    return z0


def _row(q, b):
    from .mvae import GaussianLatent

    return GaussianLatent(Tensor(q.mean.data[b]), Tensor(q.logvar.data[b]))


def _run(ys: list[np.ndarray | None], model: MvaeModel, samplers: Sequence[Sampler | None],
         config: FusionConfig, rngs: Sequence[Rng], z0: np.ndarray | None = None):
    """Optimise all restarts of all samples; returns per-row arrays."""
    B = len(rngs)
    R = config.n_restarts
    lam0 = config.prior_weight
    lams = config.weights_for(samplers)
    ys_rows = [None if y is None else np.repeat(np.atleast_2d(y), R, axis=0) for y in ys]
    if z0 is None:
        z0 = _initial_points(ys, model, samplers, config, rngs)
    rows = B * R
    z = Tensor(z0.copy(), requires_grad=True)
    observed = [m for m, y in enumerate(ys_rows) if y is not None]
    groups = observed if observed else [None]
    opts = {m: make_optimizer(config.optimizer, [z], config.lr_for(0 if m is None else m)) for m in groups}

    trace = np.empty((rows, config.max_iters))
    active = np.ones(rows, dtype=bool)
    failed = np.zeros(rows, dtype=bool)
    converged = np.zeros(rows, dtype=bool)
    iters = np.full(rows, config.max_iters)

    def step(m):
        frozen = z.data[~active].copy()
        z.zero_grad()
        mods = [] if m is None else [m]
        loss = fusion_loss(z, ys_rows, model, samplers, lam0, lams, mods)
        backward(loss)
        opts[m].step()
        z.data[~active] = frozen

    for it in range(config.max_iters):
        for m in groups:
            for _ in range(config.inner_steps):
                try:
                    step(m)
                except NonFiniteError:
                    bad = ~np.isfinite(_row_losses_safe(z.data, ys_rows, model, samplers, lam0, lams))
                    bad |= ~np.isfinite(z.data).all(axis=1)
                    if not bad.any():
                        raise
                    failed |= bad & active
                    active &= ~bad
                    z.data[bad] = 0.0
                    iters[bad] = it + 1
                    if not active.any():
                        break
                    step(m)
        losses = _row_losses_safe(z.data, ys_rows, model, samplers, lam0, lams)
        losses[failed] = np.inf
        trace[:, it] = losses
        newly_bad = active & ~np.isfinite(losses)
        if newly_bad.any():
            failed |= newly_bad
            active &= ~newly_bad
            iters[newly_bad] = it + 1
        if it >= config.window:
            prev = trace[:, it - config.window]
            done = active & (np.abs(losses - prev) <= config.tol * np.abs(prev))
            converged |= done
            iters[done] = it + 1
            active &= ~done
        if not active.any():
            trace = trace[:, : it + 1]
            break
    final = np.where(failed, np.inf, trace[np.arange(rows), iters - 1])
    return z.data.copy(), final, trace, converged, iters


def _row_losses_safe(z, ys, model, samplers, lam0, lams):
    try:
        with np.errstate(all="ignore"):
            return _row_losses(z, ys, model, samplers, lam0, lams)
    except (NonFiniteError, FloatingPointError):
        out = np.empty(len(z))
        for i in range(len(z)):
            try:
                out[i] = _row_losses(z[i:i + 1], [None if y is None else y[i:i + 1] for y in ys],
                                     model, samplers, lam0, lams)[0]
            except (NonFiniteError, FloatingPointError):
                out[i] = np.inf
        return out


def _collect(z, final, trace, converged, iters, B, R, model, sample_ids) -> list[FusionResult]:
    results = []
    for b in range(B):
        sl = slice(b * R, (b + 1) * R)
        losses = final[sl]
        if not np.isfinite(losses).any():
            raise FusionError(f"all {R} restarts diverged for sample {sample_ids[b]}")
        w = int(np.argmin(losses))
        row = b * R + w
        z_map = z[row].copy()
        results.append(FusionResult(
            z_map=z_map,
            restart_losses=losses.copy(),
            loss_trace=trace[row, : iters[row]].copy(),
            reconstructions=[r[0] for r in model.reconstruct(z_map[None, :])],
            converged=bool(converged[row]),
            iterations=int(iters[row]),
            winner=w,
            sample_id=sample_ids[b],
            restart_z=z[sl].copy(),
        ))
    return results


def sflr_fuse(observations: Sequence[np.ndarray | None], model: MvaeModel,
              samplers: Sequence[Sampler | None], config: FusionConfig | None = None,
              rng: Rng | None = None, sample_id: int = 0) -> FusionResult:
    """Fuse one sample's observations (``None`` for a missing modality) into ``z_map``."""
    config = config or FusionConfig()
    rng = rng or Rng(0)
    _check_inputs(observations, model, samplers)
    ys = [None if y is None else np.asarray(y, dtype=np.float64).reshape(1, -1) for y in observations]
    out = _run(ys, model, samplers, config, [rng.child(sample_id)])
    return _collect(*out, 1, config.n_restarts, model, [sample_id])[0]


def fuse_many(observations: Sequence[np.ndarray | None], model: MvaeModel, samplers: Sequence[Sampler | None],
              config: FusionConfig | None = None, rng: Rng | None = None,
              sample_ids: Sequence[int] | None = None) -> list[FusionResult]:
    """Vectorised :func:`sflr_fuse` over a batch; ``observations[m]`` is ``(B, n_m)`` or ``None``."""
    config = config or FusionConfig()
    rng = rng or Rng(0)
    _check_inputs(observations, model, samplers)
    ys = [None if y is None else np.atleast_2d(np.asarray(y, dtype=np.float64)) for y in observations]
    B = next((y.shape[0] for y in ys if y is not None), None)
    if B is None:
        if sample_ids is None:
            raise ValueError("sample_ids are required when no modality is observed")
        B = len(sample_ids)
    sample_ids = list(range(B)) if sample_ids is None else [int(s) for s in sample_ids]
    out = _run(ys, model, samplers, config, [rng.child(s) for s in sample_ids])
    return _collect(*out, B, config.n_restarts, model, sample_ids)


def _check_inputs(observations, model, samplers):
    if len(observations) != model.n_modalities or len(samplers) != model.n_modalities:
        raise ValueError("one observation slot and one sampler slot per modality required")
    for m, (y, s) in enumerate(zip(observations, samplers)):
        if y is not None and s is None:
            raise ValueError(f"modality {m} is observed but has no sampler")
        if y is not None and np.shape(y)[-1] != s.n_out:
            raise ValueError(f"modality {m}: observation length {np.shape(y)[-1]} != sampler output {s.n_out}")


# -- experiment-level helpers ----------------------------------------------
@dataclass
class BatchSummary:
    rows: list[dict]
    mean_mse: list[float]
    std_mse: list[float]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()


def recon_mse(x_hat, x) -> float:
    x_hat, x = np.asarray(x_hat), np.asarray(x)
    if x_hat.shape != x.shape:
        raise ValueError("shape mismatch")
    return float(np.mean((x_hat - x) ** 2))


def observe(x_batch: Sequence[np.ndarray], samplers: Sequence[Sampler | None], rng: Rng,
            sample_ids: Sequence[int]) -> list[np.ndarray | None]:
    """Generate noisy observations; the noise stream of each sample is keyed by its id."""
    out = []
    for m, s in enumerate(samplers):
        if s is None:
            out.append(None)
            continue
        ys = [s.apply(x_batch[m][i], rng.child(m).child(int(sid))).y for i, sid in enumerate(sample_ids)]
        out.append(np.stack(ys))
    return out


def batch_fuse(x_batch: Sequence[np.ndarray], model: MvaeModel, samplers: Sequence[Sampler | None],
               config: FusionConfig | None = None, rng: Rng | None = None,
               sample_ids: Sequence[int] | None = None,
               observations: Sequence[np.ndarray | None] | None = None):
    """Observe true signals ``x_batch[m]`` (``(B, N)``), fuse, and score every modality.

    Returns ``(results, summary)``; the summary holds per-element reconstruction
    MSE against the true signals, per sample and modality.
    """
    config = config or FusionConfig()
    rng = rng or Rng(0)
    x_batch = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in x_batch]
    B = x_batch[0].shape[0]
    if B < 1:
        raise ValueError("batch_fuse needs at least one sample")
    sample_ids = list(range(B)) if sample_ids is None else [int(s) for s in sample_ids]
    if observations is None:
        observations = observe(x_batch, samplers, rng.child("noise"), sample_ids)
    results = fuse_many(observations, model, samplers, config, rng.child("fusion"), sample_ids)
    rows = []
    per_mod = [[] for _ in range(model.n_modalities)]
    for i, res in enumerate(results):
        for m in range(model.n_modalities):
            err = recon_mse(res.reconstructions[m], x_batch[m][i])
            per_mod[m].append(err)
            s = samplers[m]
            rows.append({
                "sample_id": res.sample_id,
                "modality": m + 1,
                "n_measurements": s.n_out if s is not None else 0,
                "noise_std": s.noise_std if s is not None else 0.0,
                "recon_mse": repr(err),
                "final_loss": repr(res.final_loss),
                "restarts": config.n_restarts,
                "iterations": res.iterations,
            })
    summary = BatchSummary(rows, [float(np.mean(v)) for v in per_mod], [float(np.std(v)) for v in per_mod])
    return results, summary


def build_samplers(specs: Sequence[SamplerSpec | None], signal_dims: Sequence[int], seed: int) -> list[Sampler | None]:
    """One operator per modality, each from its own stream of ``seed``."""
    root = Rng(seed).child("samplers")
    return [None if s is None else build_sampler(s, n, root.child(m).child(s.seed))
            for m, (s, n) in enumerate(zip(specs, signal_dims))]


@dataclass
class AsymmetricResult:
    weak_alone: list[FusionResult]
    with_strong: list[FusionResult]
    weak_alone_mse: float
    with_strong_mse: list[float]


def asymmetric_fuse(weak_obs: np.ndarray, strong_obs: np.ndarray | None, model: MvaeModel,
                    weak_sampler: Sampler, strong_sampler: Sampler | None = None,
                    config: FusionConfig | None = None, rng: Rng | None = None,
                    weak: int = 0, strong: int = 1, sample_ids: Sequence[int] | None = None) -> list[FusionResult]:
    """Fuse a subsampled/noisy weak modality together with a fully observed strong one.

    ``strong_obs=None`` fuses the weak modality alone. A missing ``strong_sampler``
    defaults to the identity.
    """
    if strong_obs is not None and strong_sampler is None:
        strong_sampler = build_sampler(SamplerSpec("identity"), model.signal_dims[strong])
    obs: list = [None] * model.n_modalities
    smp: list = [None] * model.n_modalities
    obs[weak], smp[weak] = weak_obs, weak_sampler
    if strong_obs is not None:
        obs[strong], smp[strong] = strong_obs, strong_sampler
    return fuse_many(obs, model, smp, config, rng, sample_ids)


def asymmetric_experiment(x_batch: Sequence[np.ndarray], model: MvaeModel, weak_spec: SamplerSpec,
                          config: FusionConfig | None = None, seed: int = 0, weak: int = 0, strong: int = 1,
                          sample_ids: Sequence[int] | None = None) -> AsymmetricResult:
    """Weak-alone vs weak+strong reconstruction error on the same observations."""
    x_batch = [np.atleast_2d(x) for x in x_batch]
    B = x_batch[0].shape[0]
    sample_ids = list(range(B)) if sample_ids is None else list(sample_ids)
    specs: list = [None] * model.n_modalities
    specs[weak] = weak_spec
    samplers = build_samplers(specs, model.signal_dims, seed)
    rng = Rng(seed)
    weak_y = observe(x_batch, samplers, rng.child("noise"), sample_ids)[weak]
    strong_sampler = build_sampler(SamplerSpec("identity"), model.signal_dims[strong])
    alone = asymmetric_fuse(weak_y, None, model, samplers[weak], None, config, rng.child("fusion"),
                            weak, strong, sample_ids)
    both = asymmetric_fuse(weak_y, x_batch[strong], model, samplers[weak], strong_sampler, config,
                           rng.child("fusion"), weak, strong, sample_ids)
    alone_mse = float(np.mean([recon_mse(r.reconstructions[weak], x_batch[weak][i]) for i, r in enumerate(alone)]))
    both_mse = [float(np.mean([recon_mse(r.reconstructions[m], x_batch[m][i]) for i, r in enumerate(both)]))
                for m in (weak, strong)]
    return AsymmetricResult(alone, both, alone_mse, both_mse)
