import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentfuse.acceptance import grad_check, relative_error
from latentfuse.numkit import (
    MLP,
    SGD,
    Adam,
    DomainError,
    Linear,
    NonFiniteError,
    Rng,
    Tensor,
    backward,
    clamp,
    clip_grad_norm,
    elementwise,
    exp,
    get_tape,
    log,
    make_optimizer,
    matmul,
    no_grad,
    opt_step,
    rng_gaussian,
    square,
    tanh,
    tsum,
)

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


# -- matmul ----------------------------------------------------------------
def test_matmul_identity_returns_vector():
    v = np.array([[1.0], [-2.0], [0.5]])
    assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(v)).data, v)


def test_matmul_hand_computed():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch_raises():
    with pytest.raises(ValueError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_of_sum_is_ones_times_b_transpose():
    rng = Rng(3)
    a = Tensor(rng.normal((5, 4)), requires_grad=True)
    b = rng.normal((4, 3))
    backward(tsum(matmul(a, Tensor(b))))
    assert np.allclose(a.grad, np.ones((5, 3)) @ b.T)
    assert grad_check(lambda t: tsum(matmul(t[0], t[1])), [a.data, b]) < 1e-6


# -- elementwise --------------------------------------------------------------
def test_tanh_at_zero():
    x = Tensor([0.0], requires_grad=True)
    y = tanh(x)
    backward(tsum(y))
    assert y.data[0] == 0.0 and x.grad[0] == 1.0


def test_square_sum_and_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = tsum(square(x))
    assert loss.data == 5.0
    backward(loss)
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_tanh_grad_matches_central_difference():
    x = Tensor([0.7], requires_grad=True)
    backward(tsum(tanh(x)))
    h = 1e-5
    fd = (np.tanh(0.7 + h) - np.tanh(0.7 - h)) / (2 * h)
    assert abs(x.grad[0] - fd) / abs(fd) < 1e-6


@pytest.mark.parametrize("op", ["add", "sub", "mul", "tanh", "exp", "log", "square"])
def test_elementwise_dispatch(op):
    a = np.array([0.5, 1.5])
    b = np.array([2.0, 0.25])
    args = [Tensor(a), Tensor(b)] if op in ("add", "sub", "mul") else [Tensor(a)]
    ref = {"add": a + b, "sub": a - b, "mul": a * b, "tanh": np.tanh(a), "exp": np.exp(a), "log": np.log(a),
           "square": a * a}[op]
    assert np.allclose(elementwise(op, *args).data, ref)


def test_elementwise_unknown_op():
    with pytest.raises(ValueError):
        elementwise("sinh", Tensor([1.0]))


def test_log_domain_error():
    with pytest.raises(DomainError):
        log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        log(Tensor([-1.0]))


def test_exp_overflow_is_flagged():
    with pytest.raises(DomainError):
        exp(Tensor([1000.0]))


def test_nan_input_raises():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([1.0]) * np.inf


def test_broadcast_add_reduces_gradient():
    a = Tensor(np.ones((3, 2)), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    backward(tsum(a + b))
    assert np.array_equal(b.grad, [3.0, 3.0])


# -- backward ------------------------------------------------------------------
def test_constant_loss_gives_zero_grads():
    p = Tensor([1.0, 2.0], requires_grad=True)
    p.zero_grad()
    backward(tsum(p) * 0.0 + 3.0)
    assert np.array_equal(p.grad, [0.0, 0.0])
    backward(Tensor(3.0))
    assert np.array_equal(p.grad, [0.0, 0.0])


def test_norm_squared_gradient():
    z = Tensor([1.0, -1.0, 2.0], requires_grad=True)
    backward(tsum(square(z)))
    assert np.array_equal(z.grad, [2.0, -2.0, 4.0])


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)


def test_backward_clears_tape():
    x = Tensor([1.0], requires_grad=True)
    y = tanh(x * 2.0)
    assert len(get_tape().nodes) > 0
    backward(tsum(y))
    assert len(get_tape().nodes) == 0


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = tanh(x)
    assert not y.requires_grad and len(get_tape().nodes) == 0


def test_two_layer_mlp_gradients_match_finite_differences():
    from latentfuse.acceptance import _mlp_case

    assert _mlp_case(Rng(11)) < 1e-4


# -- optimizers --------------------------------------------------------------------
def test_sgd_single_step():
    p = Tensor([1.0], requires_grad=True)
    opt = SGD([p], lr=0.1)
    opt.step([np.array([2.0])])
    assert p.data[0] == pytest.approx(0.8)
    assert opt.t == 1


def test_zero_gradient_leaves_parameters_unchanged():
    for kind in ("sgd", "adam"):
        p = Tensor([1.5, -2.0], requires_grad=True)
        opt = make_optimizer(kind, [p], 0.1)
        opt_step(opt, [p], [np.zeros(2)])
        assert np.array_equal(p.data, [1.5, -2.0])


def test_adam_converges_on_scalar_quadratic():
    p = Tensor([0.0], requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        backward(tsum(square(p - 3.0)))
        opt.step()
    assert abs(p.data[0] - 3.0) < 0.05


def test_adam_state_roundtrip_and_step_counter():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = Adam([p], lr=0.01)
    steps = []
    for _ in range(3):
        opt.step([np.array([1.0, -1.0, 0.5])])
        steps.append(opt.t)
    assert steps == [1, 2, 3]
    other = Adam([Tensor(np.ones(3))], lr=0.01)
    other.load_state_dict(opt.state_dict())
    assert other.t == 3 and all(m.shape == (3,) for m in other.m)


def test_opt_step_rejects_foreign_params():
    opt = SGD([Tensor([1.0])], lr=0.1)
    with pytest.raises(ValueError):
        opt_step(opt, [Tensor([1.0])], [np.zeros(1)])


def test_clip_grad_norm():
    p = Tensor([0.0, 0.0], requires_grad=True)
    p.grad = np.array([30.0, 40.0])
    assert clip_grad_norm([p], 10.0) == pytest.approx(50.0)
    assert np.linalg.norm(p.grad) == pytest.approx(10.0)


def test_weight_decay_enters_gradient():
    p = Tensor([2.0], requires_grad=True)
    SGD([p], lr=0.5, weight_decay=0.1).step([np.zeros(1)])
    assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.2)


# -- rng -------------------------------------------------------------------------------
def test_rng_gaussian_zero_std():
    t = rng_gaussian(Rng(0), (3, 2), mean=1.25, std=0.0)
    assert np.all(t.data == 1.25)


def test_rng_same_seed_bitwise_identical():
    a = rng_gaussian(Rng(42, 7), (50,))
    b = rng_gaussian(Rng(42, 7), (50,))
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, rng_gaussian(Rng(42, 8), (50,)).data)


def test_rng_negative_std_rejected():
    with pytest.raises(ValueError):
        Rng(0).normal(3, std=-1.0)


def test_rng_law_of_large_numbers():
    n, mean, std = 100_000, 0.3, 2.0
    draws = rng_gaussian(Rng(5), (n,), mean, std).data
    assert abs(draws.mean() - mean) < 4 * std / np.sqrt(n)


def test_child_streams_are_uncorrelated():
    root = Rng(9)
    a, b = root.child("a").normal(20_000), root.child("b").normal(20_000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / np.sqrt(20_000)
    assert np.array_equal(root.child("a").normal(5), Rng(9).child("a").normal(5))


def test_linear_init_scale():
    lin = Linear(400, 300, Rng(0))
    assert np.std(lin.W.data) == pytest.approx(1 / np.sqrt(400), rel=0.02)
    assert np.all(lin.b.data == 0)


# -- properties --------------------------------------------------------------------------
@pytest.mark.property
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["add", "sub", "mul", "div", "matmul", "tanh", "exp", "log",
                                                "square", "power", "clamp", "log_softmax", "concat"]))
def test_every_op_gradient_matches_central_differences(seed, name):
    from latentfuse.acceptance import _op_cases

    cases = {n: (b, a) for n, b, a in _op_cases(Rng(seed))}
    build, arrs = cases[name]
    assert grad_check(build, arrs) < 1e-4


@pytest.mark.property
def test_graph_evaluation_is_deterministic_for_100_steps():
    def run():
        net = MLP(4, 8, 3, Rng(1))
        opt = Adam(net.parameters(), lr=0.01)
        x = Rng(2).normal((16, 4))
        y = Rng(3).normal((16, 3))
        losses = []
        for _ in range(100):
            opt.zero_grad()
            loss = tsum(square(net(Tensor(x)) - y))
            backward(loss)
            opt.step()
            losses.append(float(loss.data))
        return np.array(losses)

    assert np.array_equal(run(), run())


@pytest.mark.property
@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_clamp_is_idempotent(x):
    once = clamp(Tensor(x), -10, 10).data
    assert np.array_equal(clamp(Tensor(once), -10, 10).data, once)
    assert np.all((once >= -10) & (once <= 10))


@pytest.mark.property
@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=finite))
def test_no_silent_nonfinite(x):
    # either a finite result or an explicit error, never a NaN/Inf tensor
    for fn in (lambda t: log(t), lambda t: exp(t * 300.0), lambda t: t / (t - t)):
        try:
            out = fn(Tensor(x))
        except (DomainError, NonFiniteError, FloatingPointError):
            continue
        assert np.all(np.isfinite(out.data))


@pytest.mark.property
@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 1000))
def test_rng_streams_reproducible(seed, stream):
    assert np.array_equal(Rng(seed, stream).normal(8), Rng(seed, stream).normal(8))


def test_relative_error_guard():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
