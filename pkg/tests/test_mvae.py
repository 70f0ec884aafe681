import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentfuse.acceptance import _model_case, poe_quadrature_error
from latentfuse.mvae import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    CheckpointError,
    GaussianLatent,
    MissingModalityError,
    MvaeModel,
    TrainConfig,
    elbo_loss,
    evaluate_loss,
    kl_to_standard_normal,
    load_model,
    moe_combine,
    poe_combine,
    reconstruction_mse,
    reparam_sample,
    save_model,
    train,
)
from latentfuse.numkit import Rng, Tensor, backward, tsum
from latentfuse.protein_synth import make_toy_dataset


def g(mean, var):
    return GaussianLatent(np.atleast_1d(np.asarray(mean, float)), np.log(np.atleast_1d(np.asarray(var, float))))


@pytest.fixture(scope="module")
def small():
    data, _, _ = make_toy_dataset(1, n_samples=200)
    return data


# -- encode ------------------------------------------------------------------------
@pytest.mark.parametrize("mode", ["poe", "moe"])
def test_untrained_encode_finite_within_clamp(mode):
    model = MvaeModel([32, 32], posterior_mode=mode)
    q = model.encode(Rng(0).normal((7, 32), std=50.0), 0)
    assert q.mean.shape == (7, 4)
    assert np.all(np.isfinite(q.mean.data))
    assert np.all((q.logvar.data >= LOGVAR_MIN) & (q.logvar.data <= LOGVAR_MAX))


def test_encode_is_deterministic():
    model = MvaeModel([32, 32], posterior_mode="poe")
    x = Rng(1).normal(32)
    a, b = model.encode(x, 1), model.encode(x, 1)
    assert np.array_equal(a.mean.data, b.mean.data) and np.array_equal(a.logvar.data, b.logvar.data)


def test_encode_shape_and_index_errors():
    model = MvaeModel([32, 16], posterior_mode="poe")
    with pytest.raises(ValueError):
        model.encode(np.zeros(32), 1)
    with pytest.raises(IndexError):
        model.encode(np.zeros(32), 2)


def test_architecture_dims():
    model = MvaeModel([32, 32], latent_dim=4, hidden=16, posterior_mode="poe")
    assert all(enc.out.W.shape == (16, 8) for enc in model.encoders)
    assert all(dec.out.W.shape == (16, 32) for dec in model.decoders)
    assert model.n_parameters() == 2 * (32 * 16 + 16 + 16 * 8 + 8) + 2 * (4 * 16 + 16 + 16 * 32 + 32)


@pytest.mark.slow
def test_trained_posterior_mean_tracks_true_latent(trained):
    # canonical correlations between the posterior mean and z_true
    test = trained.data.test()
    z = trained.model.posterior_mean([test.x[0], test.x[1]])
    a = z - z.mean(0)
    b = test.z_true - test.z_true.mean(0)

    def whiten(u):
        vals, vecs = np.linalg.eigh(u.T @ u / len(u))
        return u @ vecs / np.sqrt(vals)

    corr = np.linalg.svd(whiten(a).T @ whiten(b) / len(a), compute_uv=False)
    assert np.all(corr > 0.5)


# -- poe -------------------------------------------------------------------------------
def test_poe_no_experts_with_prior_is_standard_normal():
    q = poe_combine([None, None], include_prior=True, shape=(4,))
    assert np.array_equal(q.mean.data, np.zeros(4)) and np.array_equal(q.var, np.ones(4))


def test_poe_one_expert_and_prior():
    q = poe_combine([g(2.0, 1.0)], include_prior=True)
    assert q.mean.data[0] == pytest.approx(1.0) and q.var[0] == pytest.approx(0.5)


def test_poe_two_experts_no_prior_matches_grid_product():
    q = poe_combine([g(1.0, 1.0), g(3.0, 1.0)], include_prior=False)
    assert q.mean.data[0] == pytest.approx(2.0) and q.var[0] == pytest.approx(0.5)
    err = poe_quadrature_error([(np.array([1.0, 1.0]), np.array([1.0, 1.0])),
                                (np.array([3.0, 3.0]), np.array([1.0, 1.0]))], include_prior=False)
    assert err < 1e-6


def test_poe_without_any_expert_or_prior_raises():
    with pytest.raises(ValueError):
        poe_combine([None], include_prior=False)


# -- moe -------------------------------------------------------------------------------
def test_moe_single_expert_is_that_expert():
    e = g([0.5, -1.0], [0.3, 2.0])
    mix = moe_combine([e, None])
    z = Rng(0).normal((20, 2))
    assert np.allclose(mix.log_density(z), e.log_density(z))
    assert np.array_equal(mix.mean, e.mean.data)


def test_moe_identical_experts_same_density():
    e = g([1.0], [0.5])
    z = np.linspace(-3, 3, 11)[:, None]
    assert np.allclose(moe_combine([e, e]).log_density(z), e.log_density(z))


def test_moe_separated_experts_bimodal():
    mix = moe_combine([g(-3.0, 0.1), g(3.0, 0.1)])
    s = mix.sample(Rng(5), 10_000)[:, 0]
    assert abs(s.mean()) < 0.15
    assert np.mean(np.abs(s) < 1.5) < 0.001
    assert 0.45 < np.mean(s > 0) < 0.55


def test_moe_needs_a_present_expert():
    with pytest.raises(ValueError):
        moe_combine([None, None])


# -- reparam ---------------------------------------------------------------------------
def test_reparam_at_logvar_floor_is_mean():
    q = GaussianLatent(np.array([1.5, -2.0]), np.array([-1e6, -1e6]))
    z = reparam_sample(q, Rng(0))
    assert np.allclose(z.data, q.mean.data, atol=0.01)


def test_reparam_pathwise_gradient_wrt_mean_is_one():
    mu = Tensor(np.array([0.3, -0.7]), requires_grad=True)
    q = GaussianLatent(mu, np.zeros(2))
    backward(tsum(reparam_sample(q, Rng(2))))
    assert np.array_equal(mu.grad, [1.0, 1.0])


def test_reparam_moments():
    q = GaussianLatent(np.full((100_000, 1), 0.8), np.full((100_000, 1), np.log(2.5)))
    z = reparam_sample(q, Rng(3)).data[:, 0]
    assert z.mean() == pytest.approx(0.8, rel=0.01)
    assert z.var() == pytest.approx(2.5, rel=0.01)


# -- elbo --------------------------------------------------------------------------------
def test_kl_of_prior_is_zero():
    assert kl_to_standard_normal(GaussianLatent.standard(4)).data == 0.0


def test_kl_unit_shift_is_half_per_dim():
    assert kl_to_standard_normal(g([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])).data == pytest.approx(1.5)


def test_kl_matches_monte_carlo():
    q = g([0.7, -0.4], [0.5, 1.8])
    z = q.sample(Rng(8), 100_000)
    prior = GaussianLatent.standard(2)
    mc = np.mean(q.log_density(z) - prior.log_density(z))
    assert mc == pytest.approx(float(kl_to_standard_normal(q).data), rel=0.01)


def test_elbo_is_recon_plus_beta_kl(small):
    model = MvaeModel([32, 32])
    xs = [small.x[0][:10], small.x[1][:10]]
    eps = [Rng(0).normal((10, 4))]
    q = model.encode_joint(xs)
    z = reparam_sample(q, eps=eps[0])
    recon = sum(np.sum((model.reconstruct(z.data)[m] - xs[m]) ** 2, axis=1) for m in range(2))
    expected = np.mean(recon + 0.3 * kl_to_standard_normal(q).data)
    assert float(elbo_loss(model, xs, beta=0.3, eps=eps).data) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("mode", ["joint", "poe", "moe"])
def test_elbo_gradient_matches_finite_differences(mode):
    assert _model_case(Rng(4), "elbo", mode) < 1e-4


def test_joint_mode_rejects_missing_modality(small):
    model = MvaeModel([32, 32], posterior_mode="joint")
    with pytest.raises(MissingModalityError):
        elbo_loss(model, [small.x[0][:4], small.x[1][:4]], Rng(0), present=[True, False])
    with pytest.raises(MissingModalityError):
        model.posterior([small.x[0][:4], None])


# -- train -------------------------------------------------------------------------------
def test_zero_epochs_leaves_model_unchanged(small):
    model = MvaeModel([32, 32])
    before = [p.data.copy() for p in model.parameters()]
    res = train(model, small, TrainConfig(epochs=0))
    assert res.history == []
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(kl_scale=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        train(MvaeModel([32, 32]), [np.zeros((0, 32))] * 2, TrainConfig(epochs=1))


@pytest.mark.parametrize("mode", ["poe", "moe"])
def test_short_training_reduces_loss_in_factorized_modes(small, mode):
    model = MvaeModel([32, 32], posterior_mode=mode, seed=2)
    xs = [small.train().x[m] for m in range(2)]
    before = evaluate_loss(model, xs, 0.1)
    train(model, small, TrainConfig(epochs=15, posterior_mode=mode, seed=2))
    assert evaluate_loss(model, xs, 0.1) < before


def test_training_is_deterministic(small):
    runs = []
    for _ in range(2):
        model = MvaeModel([32, 32], seed=3)
        runs.append(train(model, small, TrainConfig(epochs=3, seed=3)).history)
    assert runs[0] == runs[1]


@pytest.mark.slow
def test_default_training_halves_loss(trained):
    tr = trained.data.train()
    xs = [tr.x[0], tr.x[1]]
    fresh = MvaeModel([32, 32], seed=0)
    initial = evaluate_loss(fresh, xs, TrainConfig().kl_scale)
    assert trained.history[-1] < 0.5 * initial
    assert trained.history[-1] < 0.5 * trained.history[0]


@pytest.mark.slow
def test_default_training_heldout_reconstruction(trained):
    te = trained.data.test()
    assert max(reconstruction_mse(trained.model, [te.x[0], te.x[1]])) < 0.02


@pytest.mark.slow
def test_default_loss_moving_average_non_increasing(trained):
    h = np.asarray(trained.history)
    ma = np.convolve(h, np.ones(10) / 10, mode="valid")
    assert len(h) == 200
    assert np.all(np.diff(ma) <= 0)


# -- checkpoints ---------------------------------------------------------------------------
def test_checkpoint_roundtrip(tmp_path, small):
    model = MvaeModel([32, 32], posterior_mode="poe", seed=9)
    res = train(model, small, TrainConfig(epochs=2, posterior_mode="poe", seed=9))
    path = tmp_path / "m.json"
    save_model(model, path, TrainConfig().to_dict(), res.optimizer, res.epochs_done, res.history)
    back, doc, opt_state = load_model(path, with_state=True)
    for (name, p), q in zip(model.named_parameters().items(), back.parameters()):
        assert np.array_equal(p.data, q.data), name
    xs = [small.x[0][:16], small.x[1][:16]]
    eps = [Rng(1).normal((16, 4))]
    assert float(elbo_loss(model, xs, eps=eps).data) == float(elbo_loss(back, xs, eps=eps).data)
    assert doc["epochs_done"] == 2 and doc["history"] == res.history
    assert opt_state["t"] == res.optimizer.t


def test_corrupt_checkpoint_raises(tmp_path):
    path = tmp_path / "m.json"
    save_model(MvaeModel([32, 32]), path)
    doc = json.loads(path.read_text())
    path.write_text(json.dumps(dict(doc, format="other")))
    with pytest.raises(CheckpointError):
        load_model(path)
    path.write_text(json.dumps(dict(doc, version=99)))
    with pytest.raises(CheckpointError, match="version"):
        load_model(path)
    path.write_text("{not json")
    with pytest.raises(CheckpointError):
        load_model(path)


# -- properties ----------------------------------------------------------------------------
experts_st = st.lists(
    st.tuples(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-4, 4), min_size=3, max_size=3)),
    min_size=1, max_size=5)


@pytest.mark.property
@settings(max_examples=60, deadline=None)
@given(experts_st, st.booleans())
def test_poe_precision_additivity(raw, prior):
    experts = [GaussianLatent(np.array(m), np.array(lv)) for m, lv in raw]
    q = poe_combine(experts, include_prior=prior)
    total = sum(np.exp(-np.array(lv)) for _, lv in raw) + (1.0 if prior else 0.0)
    assert np.allclose(q.precision, total, rtol=1e-12)


@pytest.mark.property
@settings(max_examples=60, deadline=None)
@given(experts_st, st.booleans(), st.randoms(use_true_random=False))
def test_poe_permutation_invariance(raw, prior, rnd):
    experts = [GaussianLatent(np.array(m), np.array(lv)) for m, lv in raw]
    shuffled = experts[:]
    rnd.shuffle(shuffled)
    a, b = poe_combine(experts, include_prior=prior), poe_combine(shuffled, include_prior=prior)
    assert np.allclose(a.mean.data, b.mean.data, rtol=1e-12, atol=1e-12)
    assert np.allclose(a.logvar.data, b.logvar.data, rtol=1e-12, atol=1e-12)


@pytest.mark.property
@settings(max_examples=6, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["joint", "poe", "moe"]))
def test_elbo_gradients_with_frozen_noise(seed, mode):
    assert _model_case(Rng(seed), "elbo", mode) < 1e-3


@pytest.mark.property
def test_joint_mode_missing_modality_always_raises():
    model = MvaeModel([32, 32])
    for present in ([True, False], [False, True]):
        with pytest.raises(MissingModalityError):
            elbo_loss(model, [np.zeros((2, 32))] * 2, Rng(0), present=present)
