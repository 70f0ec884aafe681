import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentfuse.numkit import Rng, Tensor
from latentfuse.samplers import (
    SamplerSpec,
    build_sampler,
    lipschitz_check,
    measurement_percentage,
)

N = 32


def power_iteration_norm(A, iters=500):
    v = Rng(0).normal(A.shape[1])
    for _ in range(iters):
        v = A.T @ (A @ v)
        v /= np.linalg.norm(v)
    return float(np.linalg.norm(A @ v))


def test_identity_observation_is_exact():
    s = build_sampler(SamplerSpec("identity"), N)
    x = Rng(1).normal(N)
    assert np.array_equal(s.apply(x).y, x)


def test_full_mask_gives_zero_vector():
    s = build_sampler(SamplerSpec("mask", missing_ratio=1.0), N)
    assert np.array_equal(s.apply(Rng(2).normal(N)).y, np.zeros(N))


def test_mask_zeroes_ceil_of_ratio_entries():
    s = build_sampler(SamplerSpec("mask", missing_ratio=0.3), N)
    assert s.matrix.shape == (N, N)
    assert np.sum(np.diag(s.matrix) == 0) == int(np.ceil(0.3 * N))


def test_projection_operator_norm_range():
    norms = [np.linalg.norm(build_sampler(SamplerSpec("random_projection", n_measurements=2, seed=s), N).matrix, 2)
             for s in range(100)]
    assert 0.1 <= min(norms) and max(norms) <= 3


def test_projection_shape_and_entry_scale():
    s = build_sampler(SamplerSpec("random_projection", n_measurements=32), N, Rng(0))
    assert s.n_out == 32
    big = build_sampler(SamplerSpec("random_projection", n_measurements=32), 2048, Rng(0)).matrix
    assert np.var(big) == pytest.approx(1 / 2048, rel=0.05)


@pytest.mark.parametrize("spec", [dict(kind="random_projection", n_measurements=33),
                                  dict(kind="random_projection", n_measurements=0),
                                  dict(kind="identity", noise_std=-0.1),
                                  dict(kind="mask", missing_ratio=1.5),
                                  dict(kind="fourier")])
def test_invalid_specs_rejected(spec):
    with pytest.raises(ValueError):
        build_sampler(SamplerSpec(**spec), N)


def test_noise_residual_matches_sigma():
    s = build_sampler(SamplerSpec("random_projection", n_measurements=8, noise_std=0.1), N, Rng(0))
    rng = Rng(3)
    x = rng.normal(N)
    res = [np.sum((s.apply(x, rng.child(i)).y - s.measure(x)) ** 2) / 8 for i in range(1000)]
    assert np.mean(res) == pytest.approx(0.01, rel=0.2)


def test_noise_requires_stream():
    s = build_sampler(SamplerSpec("identity", noise_std=0.1), N)
    with pytest.raises(ValueError):
        s.apply(np.zeros(N))


def test_forward_is_differentiable_and_noiseless():
    from latentfuse.numkit import backward, tsum

    s = build_sampler(SamplerSpec("random_projection", n_measurements=3, noise_std=1.0), N, Rng(0))
    x = Tensor(Rng(1).normal((2, N)), requires_grad=True)
    y = s.forward(x)
    assert np.allclose(y.data, s.measure(x.data))
    backward(tsum(y))
    assert np.allclose(x.grad, np.ones((2, 3)) @ s.matrix)


def test_lipschitz_identity_is_one():
    s = build_sampler(SamplerSpec("identity"), N)
    assert abs(lipschitz_check(s, 20, Rng(0)) - 1.0) < 1e-9


def test_lipschitz_mask_non_expansive():
    s = build_sampler(SamplerSpec("mask", missing_ratio=0.4), N)
    assert lipschitz_check(s, 50, Rng(0)) <= 1.0


def test_lipschitz_projection_below_spectral_norm():
    for seed in range(5):
        s = build_sampler(SamplerSpec("random_projection", n_measurements=4, seed=seed), N)
        assert lipschitz_check(s, 200, Rng(seed)) <= power_iteration_norm(s.matrix) + 1e-6


def test_operator_matrix_is_read_only():
    s = build_sampler(SamplerSpec("random_projection", n_measurements=2), N)
    with pytest.raises(ValueError):
        s.matrix[0, 0] = 1.0


@pytest.mark.parametrize("n,expected", [(1, "3.125%"), (2, "6.25%"), (4, "12.5%"), (8, "25%"), (32, "100%")])
def test_measurement_percentage(n, expected):
    assert measurement_percentage(n, 32) == expected


def test_spec_dict_roundtrip():
    spec = SamplerSpec("mask", missing_ratio=0.25, noise_std=0.05, seed=3)
    assert SamplerSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        SamplerSpec.from_dict({"kind": "identity", "sigma": 0.1})


# -- properties -----------------------------------------------------------------------
specs = st.one_of(
    st.builds(SamplerSpec, st.just("random_projection"), st.integers(1, N), st.none(), st.just(0.0), st.integers(0, 99)),
    st.builds(SamplerSpec, st.just("mask"), st.none(), st.floats(0, 1), st.just(0.0), st.integers(0, 99)),
    st.just(SamplerSpec("identity")),
)
signals = arrays(np.float64, N, elements=st.floats(-10, 10))


@pytest.mark.property
@settings(max_examples=60, deadline=None)
@given(specs, signals, signals, st.floats(-5, 5))
def test_sampler_linearity(spec, x1, x2, alpha):
    s = build_sampler(spec, N)
    lhs = s.apply(alpha * x1 + x2).y
    rhs = alpha * s.apply(x1).y + s.apply(x2).y
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-11)


@pytest.mark.property
@settings(max_examples=30, deadline=None)
@given(specs)
def test_operator_determinism_and_separate_noise_stream(spec):
    a, b = build_sampler(spec, N), build_sampler(spec, N)
    assert np.array_equal(a.matrix, b.matrix)
    noisy = build_sampler(SamplerSpec(**{**spec.to_dict(), "noise_std": 0.3}), N)
    assert np.array_equal(noisy.matrix, a.matrix)
