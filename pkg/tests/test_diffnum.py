import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpdistill.diffnum import (
    AdamW,
    DenseNetwork,
    GradientError,
    MadeNetwork,
    OptimizerError,
    RMSprop,
    Var,
    concat,
    grad,
    load_tensors,
    made_degrees,
    made_masks,
    save_tensors,
)
from oracles import dense_gradient_error, fd_param_gradient, made_max_violation, penalty_gradient_error, relative_gradient_error


def param(x):
    return Var(np.asarray(x, dtype=float), requires_grad=True, name="p")


# -- tape ---------------------------------------------------------------------


def test_square():
    x = param(3.0)
    assert grad(x * x, [x])[0] == pytest.approx(6.0)


def test_constant_output_has_zero_gradient():
    x = param([1.0, 2.0])
    assert np.all(grad(Var(5.0), [x])[0] == 0.0)
    assert np.all(grad((x * 0.0).sum(), [x])[0] == 0.0)


def test_non_scalar_output_rejected():
    x = param([1.0, 2.0])
    with pytest.raises(GradientError):
        grad(x * 2.0, [x])


def test_shared_subexpression_accumulates():
    x = param(2.0)
    y = x * x
    assert grad(y * y + y, [x])[0] == pytest.approx(4 * 8 + 4)


def _elementwise_ops():
    return {
        "exp": lambda v: v.exp(),
        "log": lambda v: (v * v + 1.0).log(),
        "tanh": lambda v: v.tanh(),
        "sigmoid": lambda v: v.sigmoid(),
        "log_sigmoid": lambda v: v.log_sigmoid(),
        "softplus": lambda v: v.softplus(),
        "pow": lambda v: (v * v + 0.5) ** 1.5,
        "div": lambda v: 1.0 / (v * v + 1.0),
        "sub": lambda v: 2.0 - v * 3.0,
    }


@pytest.mark.parametrize("name", list(_elementwise_ops()))
def test_elementwise_ops_against_fd(name):
    op = _elementwise_ops()[name]
    x = param(np.random.default_rng(0).normal(size=(3, 2)))
    g = grad(op(x).sum(), [x])
    g_ref = fd_param_gradient(lambda: float(op(x).sum().value), [x])
    assert relative_gradient_error(g, g_ref) < 1e-6


def test_broadcast_matmul_index_and_concat():
    rng = np.random.default_rng(1)
    A, b = param(rng.normal(size=(4, 3))), param(rng.normal(size=3))
    x = rng.normal(size=(5, 4))

    def f():
        h = x @ A + b
        return (concat([h[:, [0, 2]], h[:, 1:2].exp()]) ** 2).mean(axis=0).sum()

    g = grad(f(), [A, b])
    g_ref = fd_param_gradient(lambda: float(f().value), [A, b])
    assert relative_gradient_error(g, g_ref) < 1e-6


def test_clamp_straight_through_and_minimum():
    x = param([-50.0, 0.0, 50.0])
    y = x.clamp_straight_through(-30.0, 30.0)
    np.testing.assert_array_equal(y.value, [-30.0, 0.0, 30.0])
    np.testing.assert_array_equal(grad(y.sum(), [x])[0], [1.0, 1.0, 1.0])
    m = x.minimum(10.0)
    np.testing.assert_array_equal(grad(m.sum(), [x])[0], [1.0, 1.0, 0.0])


def test_dense_network_gradients():
    rng = np.random.default_rng(2)
    assert max(dense_gradient_error(rng) for _ in range(20)) < 1e-5


# -- gradient penalty ------------------------------------------------------------


def test_linear_critic_penalty_closed_form():
    net = DenseNetwork([3, 1], spectral_norm=False)
    w = np.array([[0.3, -1.2, 0.8]])
    net.weights[0].value = w.copy()
    x = np.random.default_rng(0).normal(size=(4, 3))
    pen, norms = net.gradient_penalty(x)
    nw = np.linalg.norm(w)
    assert pen.value == pytest.approx((nw - 1) ** 2)
    np.testing.assert_allclose(norms, nw)
    g = grad(pen, [net.weights[0]])[0]
    np.testing.assert_allclose(g, 2 * (nw - 1) * w / nw, rtol=1e-12)


def test_unit_linear_critic_has_zero_penalty_gradient():
    net = DenseNetwork([2, 1], spectral_norm=False)
    net.weights[0].value = np.array([[0.6, 0.8]])
    pen, _ = net.gradient_penalty(np.ones((3, 2)))
    assert pen.value == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(grad(pen, [net.weights[0]])[0], 0.0, atol=1e-15)


def test_input_gradient_matches_fd():
    net = DenseNetwork([3, 5, 4, 1], "softplus", seed=3)
    x = np.random.default_rng(3).normal(size=(2, 3))
    g = net.input_gradient(x).value
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1e-6
        fd = (net.numpy_forward(x + e) - net.numpy_forward(x - e)) / 2e-6
        np.testing.assert_allclose(g[:, j], fd, rtol=1e-6, atol=1e-9)


def test_penalty_second_order_gradients():
    rng = np.random.default_rng(4)
    assert max(penalty_gradient_error(rng) for _ in range(15)) < 1e-4


# -- spectral norm -------------------------------------------------------------------


def test_spectral_norm_bounds_hidden_layers():
    rng = np.random.default_rng(5)
    net = DenseNetwork([6, 12, 12, 1], seed=5)
    # ten iterations at construction need not converge; tighten first
    net.power_iteration(200)
    for W in net.effective_weights()[:-1]:
        x = rng.normal(size=(100, W.shape[1]))
        ratio = np.linalg.norm(x @ W.value.T, axis=1) / np.linalg.norm(x, axis=1)
        assert ratio.max() <= 1 + 1e-3
        assert np.linalg.norm(W.value, 2) == pytest.approx(1.0, abs=1e-6)


def test_numpy_forward_matches_tape():
    net = DenseNetwork([4, 8, 8, 1], "tanh", seed=6)
    x = np.random.default_rng(6).normal(size=(5, 4))
    np.testing.assert_allclose(net(x).value, net.numpy_forward(x), rtol=1e-13)


def test_network_state_round_trip(tmp_path):
    net = DenseNetwork([3, 6, 1], seed=7)
    save_tensors(tmp_path / "net", net.state(), {"sizes": net.sizes})
    tensors, meta = load_tensors(tmp_path / "net")
    other = DenseNetwork([3, 6, 1], seed=8)
    other.load_state(tensors)
    x = np.ones((2, 3))
    np.testing.assert_array_equal(net.numpy_forward(x), other.numpy_forward(x))
    assert meta["sizes"] == [3, 6, 1] and meta["tensors"]["W0"] == [6, 3]


# -- MADE ---------------------------------------------------------------------------


def test_made_degrees_and_masks():
    degs = made_degrees(3, [5])
    np.testing.assert_array_equal(degs[1], [1, 2, 1, 2, 1])
    np.testing.assert_array_equal(degs[2], [1, 2, 3, 1, 2, 3])
    hidden_mask, out_mask = made_masks(degs)
    assert hidden_mask[1, 2] == 0 and hidden_mask[1, 1] == 1
    # output i sees hidden units of degree < i only
    assert out_mask[0].sum() == 0
    np.testing.assert_array_equal(out_mask[2], degs[1] < 3)


def test_made_zero_weights():
    made = MadeNetwork(3, seed=0)
    for p in made.params:
        p.value = np.zeros_like(p.value)
    loc, s = made.forward(np.random.default_rng(0).normal(size=(2, 3)))
    np.testing.assert_array_equal(loc.value, 0.0)
    np.testing.assert_allclose(s.sigmoid().value, 0.5)


def test_made_hand_built_two_dimensional():
    made = MadeNetwork(2, hidden=[1], activation="tanh", zero_final=False)
    made.weights[0].value = np.array([[2.0, 5.0]])
    made.biases[0].value = np.array([0.1])
    made.weights[1].value = np.array([[7.0], [3.0], [11.0], [-2.0]])
    made.biases[1].value = np.array([0.5, 0.6, 0.7, 0.8])
    z = np.array([[0.3, -0.4]])
    h = np.tanh(2.0 * 0.3 + 0.1)  # input 2 is masked out of the degree-1 unit
    loc, s = made.forward(z)
    np.testing.assert_allclose(loc.value, [[0.5, 0.6 + 3.0 * h]])
    np.testing.assert_allclose(s.value, [[0.7, 0.8 - 2.0 * h]])


def test_made_autoregressive():
    rng = np.random.default_rng(8)
    assert max(made_max_violation(rng) for _ in range(30)) < 1e-12


def test_made_numpy_matches_tape():
    made = MadeNetwork(4, seed=3, zero_final=False)
    z = np.random.default_rng(1).normal(size=(3, 4))
    a, b = made.forward(z)
    c, d = made.numpy_forward(z)
    np.testing.assert_allclose(a.value, c, rtol=1e-13)
    np.testing.assert_allclose(b.value, d, rtol=1e-13)


# -- optimizers -----------------------------------------------------------------------


def test_zero_gradient_leaves_params():
    p = param([1.0, -2.0])
    for opt in (AdamW([p], lr=0.1, weight_decay=0.0), RMSprop([p], lr=0.1)):
        for _ in range(5):
            opt.step([np.zeros(2)])
        np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_rmsprop_decay_schedule():
    p = param(0.0)
    opt = RMSprop([p], lr=5e-4, decay=0.9999)
    opt.step_count = 10_000
    assert opt.lr == pytest.approx(1.839e-4, rel=1e-3)
    assert opt.lr == pytest.approx(5e-4 * 0.9999**10_000, rel=1e-12)


def test_rmsprop_warmup_ramp():
    p = param(0.0)
    opt = RMSprop([p], lr=1e-2, decay=0.5, warmup=4)
    lrs = []
    for _ in range(6):
        lrs.append(opt.lr)
        opt.step([np.array(1.0)])
    np.testing.assert_allclose(lrs, [1e-2 * 0.5**k * min(1.0, (k + 1) / 4) for k in range(6)], rtol=1e-12)


def test_adam_converges_on_quadratic():
    x = param(0.0)
    opt = AdamW([x], lr=0.05, weight_decay=0.0)
    for _ in range(5000):
        opt.step([2 * (x.value - 3.0)])
    assert abs(x.value - 3.0) < 1e-6


def test_adamw_decoupled_decay():
    x = param(2.0)
    opt = AdamW([x], lr=0.1, weight_decay=0.5)
    opt.step([np.array(0.0)])
    assert x.value == pytest.approx(2.0 * (1 - 0.05))


def test_optimizer_rejects_bad_gradients():
    p = param([1.0, 2.0])
    with pytest.raises(OptimizerError):
        AdamW([p]).step([np.array([np.nan, 0.0])])
    with pytest.raises(OptimizerError):
        RMSprop([p]).step([np.zeros(3)])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_identical_seeds_identical_trajectories(seed):
    def run():
        net = DenseNetwork([2, 4, 1], seed=seed)
        opt = AdamW(net.params, lr=1e-2)
        x = np.random.default_rng(seed).normal(size=(8, 2))
        for _ in range(5):
            opt.step(grad((net(x) ** 2).mean(), net.params))
        return net.state()

    a, b = run(), run()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_optimizer_state_round_trip():
    p = param([1.0, 2.0])
    opt = AdamW([p], lr=0.1)
    opt.step([np.array([0.5, -0.5])])
    other = AdamW([param([1.0, 2.0])], lr=0.3)
    other.load_state(opt.state())
    assert other.step_count == 1 and other.lr == 0.1
    np.testing.assert_array_equal(other.m[0], opt.m[0])
