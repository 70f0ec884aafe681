"""Experiment configuration: nested JSON blocks validated before any compute.

Precedence for every value is command-line flag, then (for the seed only) the
``LATENTFUSE_SEED`` environment variable, then the config file, then the
defaults below.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .eval.fewshot import ALL_METHODS, METHOD_ALIASES
from .samplers import SamplerSpec

CONFIG_VERSION = 1
SWEEP_AXES = ("n_measurements", "noise_std", "missing_ratio", "shots")
SEED_ENV = "LATENTFUSE_SEED"


class ConfigError(ValueError):
    """Invalid or physically impossible configuration."""


@dataclass
class DatasetSection:
    n_samples: int = 10_000
    signal_dim: int = 32
    spread: float = 2.0
    component_std: float = 0.5
    weight_std: float = 0.25
    bias_std: float = 0.1
    path: str | None = None

    def validate(self):
        if self.n_samples < 1:
            raise ConfigError("dataset.n_samples must be >= 1")
        if self.signal_dim < 2 or self.signal_dim % 2:
            raise ConfigError("dataset.signal_dim must be even and >= 2")
        if self.spread < 0 or self.component_std <= 0 or self.weight_std < 0 or self.bias_std < 0:
            raise ConfigError("dataset scales must be non-negative (component_std positive)")


@dataclass
class TrainSection:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 3e-3
    kl_scale: float = 0.1
    posterior_mode: str = "joint"
    modality_dropout_prob: float = 0.5
    grad_clip: float = 10.0
    lr_final_fraction: float = 0.05
    ema_decay: float = 0.995
    latent_dim: int = 4
    hidden: int = 16
    decoder_output: str = "tanh"
    checkpoint: str | None = None

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("mvae_train.epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("mvae_train.batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("mvae_train.learning_rate must be positive")
        if self.kl_scale < 0:
            raise ConfigError("mvae_train.kl_scale must be >= 0")
        if self.posterior_mode not in ("joint", "poe", "moe"):
            raise ConfigError("mvae_train.posterior_mode must be joint, poe or moe")
        if not 0 <= self.modality_dropout_prob <= 1:
            raise ConfigError("mvae_train.modality_dropout_prob must be in [0, 1]")
        if not 0 < self.lr_final_fraction <= 1:
            raise ConfigError("mvae_train.lr_final_fraction must be in (0, 1]")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("mvae_train.ema_decay must be in [0, 1)")
        if self.latent_dim < 1 or self.hidden < 1:
            raise ConfigError("mvae_train.latent_dim and hidden must be >= 1")
        if self.decoder_output not in ("tanh", "linear"):
            raise ConfigError("mvae_train.decoder_output must be tanh or linear")


@dataclass
class FusionSection:
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
    n_samples: int = 100

    def validate(self):
        if self.n_samples < 1:
            raise ConfigError("fusion.n_samples must be >= 1")
        if self.window < 1:
            raise ConfigError("fusion.window must be >= 1")
        try:
            self.to_fusion_config()
        except ValueError as exc:
            raise ConfigError(f"fusion: {exc}") from None

    def to_fusion_config(self):
        from .fusion import FusionConfig

        kw = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "n_samples"}
        return FusionConfig(**kw)


@dataclass
class BaselineSection:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    beta1: float = 0.95
    hidden: int = 16


@dataclass
class EvalSection:
    shots: list[int] = field(default_factory=lambda: [1, 5, 10])
    n_seeds: int = 5
    methods: list[str] = field(default_factory=lambda: list(ALL_METHODS))
    embedding: str = "posterior_mean"
    baseline: BaselineSection = field(default_factory=BaselineSection)

    def validate(self):
        if not self.shots or any(int(s) < 1 for s in self.shots):
            raise ConfigError("eval.shots must be a non-empty list of integers >= 1")
        if self.n_seeds < 1:
            raise ConfigError("eval.n_seeds must be >= 1")
        bad = [m for m in self.methods if m not in METHOD_ALIASES]
        if bad or not self.methods:
            raise ConfigError(f"eval.methods: unknown {bad}; choose from {list(ALL_METHODS)}")
        if self.embedding not in ("posterior_mean", "fusion"):
            raise ConfigError("eval.embedding must be posterior_mean or fusion")


@dataclass
class SweepSection:
    axis: str = "n_measurements"
    values: list[float] = field(default_factory=lambda: [1, 2, 4, 8])

    def validate(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis must be one of {list(SWEEP_AXES)}")
        if not self.values:
            raise ConfigError("sweep.values must not be empty")


def _default_samplers() -> list[dict | None]:
    return [{"kind": "random_projection", "n_measurements": 2, "noise_std": 0.0, "seed": 0}] * 2


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    mvae_train: TrainSection = field(default_factory=TrainSection)
    samplers: list[dict | None] = field(default_factory=_default_samplers)
    fusion: FusionSection = field(default_factory=FusionSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    # -- derived paths ---------------------------------------------------
    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def dataset_path(self) -> Path:
        return Path(self.dataset.path) if self.dataset.path else self.out / "dataset.bin"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.mvae_train.checkpoint) if self.mvae_train.checkpoint else self.out / "model.json"

    def sampler_specs(self) -> list[SamplerSpec | None]:
        return [None if s is None else SamplerSpec.from_dict(s) for s in self.samplers]

    def validate(self) -> "ExperimentConfig":
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version} (expected {CONFIG_VERSION})")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        self.dataset.validate()
        self.mvae_train.validate()
        self.fusion.validate()
        self.eval.validate()
        self.sweep.validate()
        if len(self.samplers) != 2:
            raise ConfigError("samplers: one entry (or null) per modality is required")
        try:
            specs = self.sampler_specs()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"samplers: {exc}") from None
        for m, spec in enumerate(specs):
            if spec is not None:
                try:
                    spec.validate_for(self.dataset.signal_dim)
                except ValueError as exc:
                    raise ConfigError(f"samplers[{m}]: {exc}") from None
        if all(s is None for s in specs):
            raise ConfigError("samplers: at least one modality must be observed")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


_SECTIONS = {
    "dataset": DatasetSection,
    "mvae_train": TrainSection,
    "fusion": FusionSection,
    "eval": EvalSection,
    "sweep": SweepSection,
}


def _build(cls, block: Any, where: str):
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(block) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    kw = dict(block)
    if cls is EvalSection and "baseline" in kw:
        kw["baseline"] = _build(BaselineSection, kw["baseline"], f"{where}.baseline")
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    kw = {k: v for k, v in doc.items() if k not in _SECTIONS}
    for name, cls in _SECTIONS.items():
        if name in doc:
            kw[name] = _build(cls, doc[name], name)
    if "samplers" in kw:
        if not isinstance(kw["samplers"], list) or any(s is not None and not isinstance(s, dict) for s in kw["samplers"]):
            raise ConfigError("samplers must be a list of objects or nulls")
    return ExperimentConfig(**kw)


def load_config(path: str | os.PathLike | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc)


def resolve_seed(flag: int | None, config_seed: int) -> int:
    """Flag beats the environment variable, which beats the config file."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return config_seed
