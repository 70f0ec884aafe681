"""Few-shot classification protocol: K-NN on latents vs supervised baselines."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..fusion import FusionConfig, build_samplers, fuse_many, observe
from ..mvae import MvaeModel
from ..numkit import Rng
from ..samplers import SamplerSpec
from .baselines import BaselineConfig, train_baseline
from .knn import knn_predict
from .metrics import f1_macro

METHOD_ALIASES = {
    "sm1": "single_modality_1",
    "sm2": "single_modality_2",
    "prob_fusion": "probability_fusion",
    "dual_branch": "dual_branch",
    "sflr": "sflr",
}
ALL_METHODS = ("sm1", "sm2", "prob_fusion", "dual_branch", "sflr")
RESULT_COLUMNS = ["method", "shots", "seed", "f1_macro"]


@dataclass
class FewShotResult:
    rows: list[dict] = field(default_factory=list)

    def mean_f1(self) -> dict[tuple[str, int], float]:
        acc: dict[tuple[str, int], list[float]] = {}
        for r in self.rows:
            acc.setdefault((r["method"], r["shots"]), []).append(r["f1_macro"])
        return {k: float(np.mean(v)) for k, v in acc.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({**r, "f1_macro": repr(r["f1_macro"])})
        return buf.getvalue()


def draw_support(labels: np.ndarray, shots: int, n_classes: int, rng: Rng) -> np.ndarray:
    """``shots`` indices per class, sampled without replacement."""
    if shots < 1:
        raise ValueError("shots must be >= 1 (empty support set)")
    out = []
    for c in range(n_classes):
        pool = np.flatnonzero(labels == c)
        if len(pool) < shots:
            raise ValueError(f"class {c} has only {len(pool)} samples")
        out.append(pool[rng.child(c).choice(len(pool), shots)])
    return np.concatenate(out)


def embed_posterior_mean(model: MvaeModel, xs: Sequence[np.ndarray]) -> np.ndarray:
    return model.posterior_mean(list(xs))


def embed_fusion(model: MvaeModel, xs: Sequence[np.ndarray], sample_ids: Sequence[int],
                 specs: Sequence[SamplerSpec | None] | None = None, config: FusionConfig | None = None,
                 seed: int = 0) -> np.ndarray:
    """``z_MAP`` per sample from (optionally subsampled) observations of ``xs``."""
    specs = specs or [SamplerSpec("identity")] * model.n_modalities
    samplers = build_samplers(specs, model.signal_dims, seed)
    rng = Rng(seed).child("embed")
    ys = observe(list(xs), samplers, rng.child("noise"), sample_ids)
    res = fuse_many(ys, model, samplers, config or FusionConfig(), rng.child("fusion"), sample_ids)
    return np.stack([r.z_map for r in res])


def fewshot_protocol(model: MvaeModel, dataset, shots_list: Sequence[int] = (1, 5, 10), n_seeds: int = 5,
                     methods: Sequence[str] = ALL_METHODS, n_classes: int = 10, seed: int = 0,
                     embedding: str = "posterior_mean", baseline_config: BaselineConfig | None = None,
                     fusion_specs: Sequence[SamplerSpec | None] | None = None,
                     fusion_config: FusionConfig | None = None) -> FewShotResult:
    """Average macro-F1 over ``n_seeds`` support draws for each method and shot count.

    SFLR classifies test latents by K-NN (``k = min(shots, 5)``) against the
    support latents. ``embedding`` is ``posterior_mean`` (full data, encoder
    mean) or ``fusion`` (``z_MAP`` from ``fusion_specs`` observations).
    """
    for m in methods:
        if m not in METHOD_ALIASES:
            raise ValueError(f"unknown method {m!r}")
    if any(s < 1 for s in shots_list):
        raise ValueError("shots must be >= 1 (empty support set)")
    train, test = dataset.train(), dataset.test()
    train_x = [train.x[m] for m in range(train.n_modalities)]
    test_x = [test.x[m] for m in range(test.n_modalities)]
    root = Rng(seed).child("fewshot")
    supports = {(shots, s): draw_support(train.labels, shots, n_classes, root.child(shots).child(s))
                for shots in shots_list for s in range(n_seeds)}

    z_train = z_test = None
    if "sflr" in methods:
        if embedding == "posterior_mean":
            z_train = embed_posterior_mean(model, train_x)
            z_test = embed_posterior_mean(model, test_x)
        elif embedding == "fusion":
            needed = np.unique(np.concatenate(list(supports.values())))
            z_train = np.full((len(train), model.latent_dim), np.nan)
            z_train[needed] = embed_fusion(model, [x[needed] for x in train_x], train.sample_ids[needed],
                                           fusion_specs, fusion_config, seed)
            z_test = embed_fusion(model, test_x, test.sample_ids, fusion_specs, fusion_config, seed)
        else:
            raise ValueError(f"unknown embedding {embedding!r}")

    result = FewShotResult()
    bcfg = baseline_config or BaselineConfig()
    for shots in shots_list:
        for s in range(n_seeds):
            idx = supports[(shots, s)]
            for method in methods:
                if method == "sflr":
                    k = min(shots, 5)
                    pred = knn_predict(z_test, z_train[idx], train.labels[idx], k)
                else:
                    cfg = replace(bcfg, seed=bcfg.seed * 1000 + s)
                    bm = train_baseline(METHOD_ALIASES[method], [x[idx] for x in train_x], train.labels[idx],
                                        n_classes, cfg)
                    pred = bm.predict(test_x)
                result.rows.append({"method": method, "shots": shots, "seed": s,
                                    "f1_macro": f1_macro(pred, test.labels, n_classes)})
    return result
