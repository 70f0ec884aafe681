"""Multimodal VAE used as the learned prior and decoder set."""

from .checkpoint import CheckpointError, load_model, save_model
from .model import POSTERIOR_MODES, MissingModalityError, MvaeModel
from .posterior import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    GaussianLatent,
    MixtureLatent,
    kl_to_standard_normal,
    moe_combine,
    poe_combine,
    reparam_sample,
)
from .train import (
    TrainConfig,
    TrainingDivergedError,
    TrainResult,
    elbo_loss,
    evaluate_loss,
    reconstruction_mse,
    train,
)

__all__ = [
    "CheckpointError",
    "GaussianLatent",
    "LOGVAR_MAX",
    "LOGVAR_MIN",
    "MissingModalityError",
    "MixtureLatent",
    "MvaeModel",
    "POSTERIOR_MODES",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "elbo_loss",
    "evaluate_loss",
    "kl_to_standard_normal",
    "load_model",
    "moe_combine",
    "poe_combine",
    "reconstruction_mse",
    "reparam_sample",
    "save_model",
    "train",
]
