"""End-to-end acceptance checks, shared by ``latentfuse verify`` and the test suite.

Each check returns a :class:`CriterionResult`; none of them raise on a failed
threshold, so a full run always reports every criterion.
"""

from __future__ import annotations

import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .eval import fewshot_protocol
from .fusion import FusionConfig, asymmetric_experiment, batch_fuse, build_samplers, fuse_many, fusion_loss
from .mvae import GaussianLatent, MvaeModel, TrainConfig, elbo_loss, load_model, poe_combine, save_model, train
from .numkit import MLP, Rng, Tensor, backward, no_grad
from .numkit import tensor as T
from .protein_synth import ProteinDataset, load_dataset, make_toy_dataset, save_dataset
from .samplers import SamplerSpec

CS_MEASUREMENTS = (1, 2, 4, 8)
MISSING_RATIOS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.number:2d}. {self.name}: {self.detail} ({self.seconds:.1f}s)"

    def as_row(self) -> dict:
        return {"criterion": self.number, "name": self.name, "passed": int(self.passed), "detail": self.detail}


@dataclass
class AcceptanceContext:
    """Dataset plus a model trained with the default recipe."""

    data: ProteinDataset
    model: MvaeModel
    history: list[float] | None = None

    @classmethod
    def build(cls, seed: int = 0, train_config: TrainConfig | None = None) -> "AcceptanceContext":
        data, _, _ = make_toy_dataset(seed)
        model = MvaeModel([data.signal_dim] * data.n_modalities, seed=seed)
        cfg = train_config or TrainConfig(seed=seed)
        res = train(model, data, cfg)
        return cls(data, model, res.history)

    @classmethod
    def from_files(cls, dataset_path, checkpoint_path) -> "AcceptanceContext":
        model, doc, _ = load_model(checkpoint_path, with_state=True)
        return cls(load_dataset(dataset_path), model, doc.get("history"))

    def test_batch(self, n: int = 100) -> tuple[list[np.ndarray], list[int]]:
        test = self.data.test().subset(np.arange(n))
        return [test.x[m] for m in range(test.n_modalities)], [int(s) for s in test.sample_ids]


# -- 1. gradients -------------------------------------------------------------
def _fd_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error, guarded for all-zero gradients."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def grad_check(build: Callable[[list[Tensor]], Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Worst relative error between backward() and central differences over all inputs."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(build(leaves))
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        def f():
            with no_grad():
                return float(build([Tensor(a) for a in arrays]).data)

        fd = _fd_grad(f, arr, h)
        ad = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        worst = max(worst, relative_error(ad, fd))
    return worst


def _op_cases(rng: Rng) -> list[tuple[str, Callable, list[np.ndarray]]]:
    """One randomized case per differentiable op; the loss weights outputs randomly."""
    def weighted(out: Tensor, w: np.ndarray) -> Tensor:
        return T.tsum(out * w)

    shape = tuple(int(v) for v in rng.integers(2, 5, 2))
    a, b = rng.normal(shape), rng.normal(shape)
    w = rng.normal(shape)
    pos = rng.uniform(shape, 0.5, 2.0)
    k = int(rng.integers(2, 5))
    m_rhs = rng.normal((shape[1], k))
    w_out = rng.normal((shape[0], k))
    vec = rng.normal((shape[1],))
    return [
        ("add", lambda t: weighted(T.add(t[0], t[1]), w), [a, b]),
        ("add_broadcast", lambda t: weighted(T.add(t[0], t[1]), w), [a, vec]),
        ("sub", lambda t: weighted(T.sub(t[0], t[1]), w), [a, b]),
        ("mul", lambda t: weighted(T.mul(t[0], t[1]), w), [a, b]),
        ("div", lambda t: weighted(T.div(t[0], t[1]), w), [a, pos]),
        ("matmul", lambda t: weighted(T.matmul(t[0], t[1]), w_out), [a, m_rhs]),
        ("tanh", lambda t: weighted(T.tanh(t[0]), w), [a]),
        ("exp", lambda t: weighted(T.exp(t[0]), w), [a]),
        ("log", lambda t: weighted(T.log(t[0]), w), [pos]),
        ("square", lambda t: weighted(T.square(t[0]), w), [a]),
        ("power", lambda t: weighted(T.power(t[0], 1.5), w), [pos]),
        ("clamp", lambda t: weighted(T.clamp(t[0], -0.5, 0.5), w), [_away_from(a, (-0.5, 0.5))]),
        ("sum_axis", lambda t: T.tsum(T.tsum(t[0], axis=0) * w[0]), [a]),
        ("mean", lambda t: T.tmean(T.square(t[0])), [a]),
        ("reshape", lambda t: weighted(T.transpose(T.reshape(t[0], shape[::-1])), w), [a]),
        ("getitem", lambda t: T.tsum(T.getitem(t[0], (slice(None), 0)) * w[:, 0]), [a]),
        ("concat", lambda t: T.tsum(T.concat([t[0], t[1]], axis=-1) * np.concatenate([w, w], -1)), [a, b]),
        ("log_softmax", lambda t: weighted(T.log_softmax(t[0], axis=-1), w), [a]),
    ]


def _away_from(a: np.ndarray, kinks: Sequence[float], margin: float = 1e-3) -> np.ndarray:
    a = a.copy()
    for k in kinks:
        close = np.abs(a - k) < margin
        a[close] = k + 10 * margin
    return a


def _param_grad_error(params, loss: Callable[[], Tensor]) -> float:
    """Check backward() against central differences for every entry of every parameter."""
    for p in params:
        p.zero_grad()
    backward(loss())
    worst = 0.0
    for p in params:
        ad = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)

        def f():
            with no_grad():
                return float(loss().data)

        worst = max(worst, relative_error(ad, _fd_grad(f, p.data)))
    return worst


def _mlp_case(rng: Rng) -> float:
    net = MLP(3, 5, 2, rng.child("net"))
    x = rng.normal((4, 3))
    target = rng.normal((4, 2))
    return _param_grad_error(net.parameters(), lambda: T.tsum(T.square(net(Tensor(x)) - target)))


def _model_case(rng: Rng, kind: str, mode: str = "joint") -> float:
    model = MvaeModel([6, 6], latent_dim=2, hidden=4, posterior_mode=mode, seed=int(rng.integers(0, 1000)))
    xs = [np.tanh(rng.normal((3, 6))), np.tanh(rng.normal((3, 6)))]
    params = model.parameters()
    if kind == "elbo":
        experts = 1 if mode == "joint" else 2
        eps = [rng.normal((3, 2)) for _ in range(experts)]

        def loss():
            return elbo_loss(model, xs, beta=0.5, eps=eps)
    else:
        samplers = build_samplers([SamplerSpec("random_projection", n_measurements=3),
                                   SamplerSpec("mask", missing_ratio=0.5)], [6, 6], int(rng.integers(0, 1000)))
        ys = [samplers[m].measure(xs[m]) for m in range(2)]
        z_arr = rng.normal((3, 2))
        zt = Tensor(z_arr, requires_grad=True)
        backward(fusion_loss(zt, ys, model, samplers, 0.3, [1.0, 2.0]))
        ad = zt.grad.copy()

        def f():
            with no_grad():
                return float(fusion_loss(Tensor(z_arr), ys, model, samplers, 0.3, [1.0, 2.0]).data)

        return relative_error(ad, _fd_grad(f, z_arr))
    return _param_grad_error(params, loss)


def check_gradients(seed: int = 0, rounds: int = 6) -> CriterionResult:
    t0 = time.perf_counter()
    rng = Rng(seed).child("gradcheck")
    n_cases, worst_op, worst_elbo, worst_fusion = 0, 0.0, 0.0, 0.0
    worst_name = ""
    for r in range(rounds):
        for name, build, arrays in _op_cases(rng.child(r)):
            err = grad_check(build, arrays)
            n_cases += 1
            if err > worst_op:
                worst_op, worst_name = err, name
        worst_op = max(worst_op, _mlp_case(rng.child(r).child("mlp")))
        n_cases += 1
        for mode in ("joint", "poe", "moe"):
            worst_elbo = max(worst_elbo, _model_case(rng.child(r).child(mode), "elbo", mode))
            n_cases += 1
        worst_fusion = max(worst_fusion, _model_case(rng.child(r).child("fusion"), "fusion"))
        n_cases += 1
    secs = time.perf_counter() - t0
    ok = worst_op < 1e-4 and worst_fusion < 1e-4 and worst_elbo < 1e-3 and n_cases >= 100 and secs < 60
    detail = (f"{n_cases} cases; worst op rel-err {worst_op:.2e} ({worst_name}), fusion {worst_fusion:.2e}, "
              f"ELBO {worst_elbo:.2e}")
    return CriterionResult(1, "gradient correctness", ok, detail, secs)


# -- 2. PoE quadrature ------------------------------------------------------------
def poe_quadrature_error(experts: Sequence[tuple[np.ndarray, np.ndarray]], include_prior: bool,
                         half_width: float = 8.0, points: int = 801) -> float:
    """Max pointwise gap between the closed-form product and a grid-normalised product (2-D)."""
    q = poe_combine([GaussianLatent(Tensor(m), Tensor(lv)) for m, lv in experts], include_prior=include_prior)
    mu, var = q.mean.data, np.exp(q.logvar.data)
    axes = [np.linspace(mu[i] - half_width * np.sqrt(var[i]), mu[i] + half_width * np.sqrt(var[i]), points)
            for i in range(2)]
    g0, g1 = np.meshgrid(*axes, indexing="ij")
    grid = np.stack([g0, g1], axis=-1)

    def log_normal(m, v):
        return -0.5 * np.sum((grid - m) ** 2 / v + np.log(2 * np.pi * v), axis=-1)

    log_prod = sum(log_normal(m, np.exp(lv)) for m, lv in experts)
    if include_prior:
        log_prod = log_prod + log_normal(np.zeros(2), np.ones(2))
    dens = np.exp(log_prod - log_prod.max())
    dens /= trapezoid(trapezoid(dens, axes[1], axis=1), axes[0])
    closed = np.exp(log_normal(mu, var))
    return float(np.max(np.abs(dens - closed)))


def check_poe(seed: int = 0, n_sets: int = 50) -> CriterionResult:
    t0 = time.perf_counter()
    rng = Rng(seed).child("poe")
    worst = 0.0
    for i in range(n_sets):
        r = rng.child(i)
        k = int(r.integers(1, 5))
        experts = [(r.normal(2, std=1.5), r.uniform(2, -1.5, 1.0)) for _ in range(k)]
        worst = max(worst, poe_quadrature_error(experts, include_prior=bool(i % 2)))
    return CriterionResult(2, "PoE closed form", worst < 1e-6, f"{n_sets} expert sets; max density error {worst:.2e}",
                           time.perf_counter() - t0)


# -- 3-6. fusion trends ----------------------------------------------------------
def cs_curve(ctx: AcceptanceContext, measurements=CS_MEASUREMENTS, noise_std: float = 0.0, n: int = 100,
             seed: int = 0, config: FusionConfig | None = None) -> dict[int, float]:
    xs, ids = ctx.test_batch(n)
    out = {}
    for k in measurements:
        samplers = build_samplers([SamplerSpec("random_projection", n_measurements=k, noise_std=noise_std)] * 2,
                                  ctx.model.signal_dims, seed)
        _, summary = batch_fuse(xs, ctx.model, samplers, config or FusionConfig(), Rng(seed), ids)
        out[k] = float(np.mean(summary.mean_mse))
    return out


def check_cs_trend(ctx: AcceptanceContext, seed: int = 0) -> CriterionResult:
    t0 = time.perf_counter()
    curve = cs_curve(ctx, seed=seed)
    errs = [curve[k] for k in CS_MEASUREMENTS]
    ratio = errs[0] / errs[1]
    decreasing = all(b < a for a, b in zip(errs, errs[1:]))
    secs = time.perf_counter() - t0
    ok = ratio >= 10 and decreasing and secs < 600
    detail = "MSE " + ", ".join(f"n={k}: {curve[k]:.3e}" for k in CS_MEASUREMENTS) + f"; n1/n2 ratio {ratio:.1f}"
    return CriterionResult(3, "CS recovery trend", ok, detail, secs)


def check_noise(ctx: AcceptanceContext, seed: int = 0) -> CriterionResult:
    t0 = time.perf_counter()
    lo = cs_curve(ctx, (4,), 0.05, seed=seed)[4]
    hi = cs_curve(ctx, (4,), 0.1, seed=seed)[4]
    ratio = max(lo, hi) / min(lo, hi)
    return CriterionResult(4, "noise robustness", ratio < 10,
                           f"n=4: sigma=0.05 {lo:.3e}, sigma=0.1 {hi:.3e}; ratio {ratio:.2f}", time.perf_counter() - t0)


def check_asymmetric(ctx: AcceptanceContext, seed: int = 0) -> CriterionResult:
    t0 = time.perf_counter()
    xs, ids = ctx.test_batch(100)
    res = asymmetric_experiment(xs, ctx.model, SamplerSpec("random_projection", n_measurements=1, noise_std=0.1),
                                FusionConfig(), seed, sample_ids=ids)
    ratio = res.weak_alone_mse / res.with_strong_mse[0]
    return CriterionResult(5, "asymmetric CS", ratio >= 2,
                           f"weak alone {res.weak_alone_mse:.3e} -> with strong {res.with_strong_mse[0]:.3e}; "
                           f"reduction {ratio:.1f}x", time.perf_counter() - t0)


def missing_curve(ctx: AcceptanceContext, ratios=MISSING_RATIOS, n: int = 100, seed: int = 0) -> dict[float, float]:
    xs, ids = ctx.test_batch(n)
    out = {}
    for r in ratios:
        samplers = build_samplers([SamplerSpec("mask", missing_ratio=r)] * 2, ctx.model.signal_dims, seed)
        _, summary = batch_fuse(xs, ctx.model, samplers, FusionConfig(), Rng(seed), ids)
        out[r] = float(np.mean(summary.mean_mse))
    return out


def check_missing(ctx: AcceptanceContext, seed: int = 0) -> CriterionResult:
    t0 = time.perf_counter()
    curve = missing_curve(ctx, seed=seed)
    vals = np.array(list(curve.values()))
    spread = float(vals.max() / vals.min())
    detail = ", ".join(f"{r:.1f}: {v:.2e}" for r, v in curve.items()) + f"; max/min {spread:.2f}"
    return CriterionResult(6, "missing-pixel robustness", spread < 3, detail, time.perf_counter() - t0)


# -- 7. few-shot ---------------------------------------------------------------------
def check_fewshot(ctx: AcceptanceContext, seed: int = 0, n_seeds: int = 5) -> CriterionResult:
    t0 = time.perf_counter()
    res = fewshot_protocol(ctx.model, ctx.data, (1, 5, 10), n_seeds, seed=seed)
    f1 = res.mean_f1()
    secs = time.perf_counter() - t0
    ok = f1[("sflr", 1)] >= f1[("dual_branch", 1)] and f1[("sflr", 10)] >= 0.5 and secs < 900
    detail = (f"1-shot SFLR {f1[('sflr', 1)]:.3f} vs dual-branch {f1[('dual_branch', 1)]:.3f}; "
              f"10-shot SFLR {f1[('sflr', 10)]:.3f}")
    return CriterionResult(7, "few-shot ordering", ok, detail, secs)


# -- 8. identity fusion ----------------------------------------------------------------
def check_identity(ctx: AcceptanceContext, seed: int = 0, n: int = 20) -> CriterionResult:
    t0 = time.perf_counter()
    model = ctx.model
    z_true = Rng(seed).child("identity").normal((n, model.latent_dim))
    xs = model.reconstruct(z_true)
    samplers = build_samplers([SamplerSpec("identity")] * model.n_modalities, model.signal_dims, seed)
    res = fuse_many(xs, model, samplers, FusionConfig(prior_weight=0.0), Rng(seed).child("fusion"))
    loss = max(r.final_loss for r in res)
    mse = max(float(np.mean((r.reconstructions[m] - xs[m][i]) ** 2)) for i, r in enumerate(res)
              for m in range(model.n_modalities))
    return CriterionResult(8, "degenerate-fusion identity", loss < 1e-6 and mse < 1e-3,
                           f"{n} samples; max loss {loss:.2e}, max recon MSE {mse:.2e}", time.perf_counter() - t0)


# -- 9. determinism ---------------------------------------------------------------------
def check_determinism(ctx: AcceptanceContext, workdir: Path | None = None, seed: int = 0) -> CriterionResult:
    from . import cli

    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        tmp = Path(tmp)
        data_path, ckpt_path = tmp / "dataset.bin", tmp / "model.json"
        save_dataset(ctx.data, data_path)
        save_model(ctx.model, ckpt_path)
        digests = []
        for run in (1, 2):
            out = tmp / f"run{run}"
            out.mkdir()
            argv = ["--output-dir", str(out), "--dataset", str(data_path), "--checkpoint", str(ckpt_path),
                    "--seed", str(seed)]
            codes = [cli.main(["fuse", *argv, "--n-samples", "10", "--n-measurements", "2"]),
                     cli.main(["classify", *argv, "--shots", "1,5", "--n-seeds", "2"])]
            if any(codes):
                return CriterionResult(9, "determinism", False, f"commands exited with {codes}",
                                       time.perf_counter() - t0)
            files = sorted(p.name for p in out.glob("*.csv"))
            digests.append({name: cli.sha256_file(out / name) for name in files})
        same = digests[0] == digests[1] and len(digests[0]) > 0
        detail = f"{len(digests[0])} result CSVs " + ("byte-identical" if same else "differ")
    return CriterionResult(9, "determinism", same, detail, time.perf_counter() - t0)


# -- 10. property suite --------------------------------------------------------------------
def find_tests_dir() -> Path | None:
    here = Path(__file__).resolve()
    for parent in here.parents:
        cand = parent / "tests"
        if cand.is_dir() and any(cand.glob("test_*.py")):
            return cand
    return None


def check_properties(tests_dir: Path | None = None) -> CriterionResult:
    t0 = time.perf_counter()
    tests_dir = tests_dir or find_tests_dir()
    if tests_dir is None:
        return CriterionResult(10, "property suite", False, "test suite not found next to the package", 0.0)
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-m", "property", "-p", "no:cacheprovider",
                           str(tests_dir)], capture_output=True, text=True)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    return CriterionResult(10, "property suite", proc.returncode == 0, tail, time.perf_counter() - t0)


def run_acceptance(ctx: AcceptanceContext, criteria: Sequence[int] | None = None,
                   workdir: Path | None = None) -> list[CriterionResult]:
    wanted = set(criteria) if criteria else set(range(1, 11))
    if workdir is not None:
        Path(workdir).mkdir(parents=True, exist_ok=True)
    checks = {
        1: lambda: check_gradients(),
        2: lambda: check_poe(),
        3: lambda: check_cs_trend(ctx),
        4: lambda: check_noise(ctx),
        5: lambda: check_asymmetric(ctx),
        6: lambda: check_missing(ctx),
        7: lambda: check_fewshot(ctx),
        8: lambda: check_identity(ctx),
        9: lambda: check_determinism(ctx, workdir),
        10: lambda: check_properties(),
    }
    return [checks[k]() for k in sorted(wanted) if k in checks]
