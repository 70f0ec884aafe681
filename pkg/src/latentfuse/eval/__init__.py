"""Downstream tasks: K-NN on latents, metrics, supervised baselines, few-shot protocol."""

from .baselines import BASELINE_KINDS, BaselineConfig, BaselineModel, fuse_probabilities, train_baseline
from .fewshot import ALL_METHODS, FewShotResult, draw_support, fewshot_protocol
from .knn import LabeledLatent, knn_classify, knn_predict
from .metrics import f1_macro, recon_error

__all__ = [
    "ALL_METHODS",
    "BASELINE_KINDS",
    "BaselineConfig",
    "BaselineModel",
    "FewShotResult",
    "LabeledLatent",
    "draw_support",
    "f1_macro",
    "fewshot_protocol",
    "fuse_probabilities",
    "knn_classify",
    "knn_predict",
    "recon_error",
    "train_baseline",
]
