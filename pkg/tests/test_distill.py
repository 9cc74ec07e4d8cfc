import csv

import numpy as np
import pytest

from gpdistill import dataset as ds
from gpdistill import mechanics as mech
from gpdistill.diffnum import DenseNetwork, grad
from gpdistill.distill import (
    HISTORY_FIELDS,
    DistillConfig,
    DistillError,
    DivergenceError,
    ForwardMap,
    critic_loss,
    flow_loss,
    make_critic,
    train,
    write_history,
)
from gpdistill.flow import FlowModel
from oracles import randomize_flow

NEO_HOOKE = {"kind": "isotropic", "keep": ["c(1,0)"]}


def ut_points(stretches):
    rule = mech.pressure_rule_for("UT")
    return [(mech.protocol_deformation("UT", lam), rule, "P11") for lam in stretches]


def linear_critic(w):
    net = DenseNetwork([len(w), 1], spectral_norm=False)
    net.weights[0].value = np.array([w], dtype=float)
    return net


# -- forward map ---------------------------------------------------------------


def test_zero_kappa_gives_zero_function():
    lib = mech.isotropic_library()
    fm = ForwardMap(lib, ut_points([1.2, 1.7, 2.5]))
    np.testing.assert_array_equal(fm(np.zeros((2, lib.n_kappa))), 0.0)


def test_neo_hooke_closed_form():
    lam = np.linspace(1.0, 3.0, 7)
    fm = ForwardMap(mech.library_from_config(NEO_HOOKE), ut_points(lam))
    c = np.array([[0.3], [1.2]])
    np.testing.assert_allclose(fm(c), 2 * c * (lam - lam**-2), rtol=1e-12, atol=1e-14)


def test_cardiac_grid_matches_clean_stresses():
    lib, kappa = mech.generator_4term()
    ctrl = {t["id"]: (np.linspace(0, 0.5, 3) if t["protocol"] != "BT" else np.linspace(1, 1.1, 3)) for t in ds.CARDIAC_LAYOUT}
    tests = ds.synthesize_dataset(lib, kappa, ds.CARDIAC_LAYOUT, ctrl, 0.0, 0.0)
    grid = ds.build_grid(tests, 5)
    out = ForwardMap.from_grid(lib, grid)(kappa)[0]
    assert out.shape == (grid.n_s,)
    for _, q, sl, tg, _ in grid.block_info():
        np.testing.assert_allclose(out[sl], ds.clean_stresses(lib, kappa, tg.test, tg.controls)[:, q], rtol=1e-10, atol=1e-12)


def test_tape_forward_map_matches_numpy():
    lib = mech.anisotropic_library()
    rule = mech.pressure_rule_for("SS_fs")
    points = [(mech.protocol_deformation("SS_fs", g), rule, "sigma_fs") for g in (0.1, 0.3)]
    points.append((mech.protocol_deformation("BT", 1.08, (1.0, 0.5)), mech.pressure_rule_for("BT"), "sigma_ff"))
    fm = ForwardMap(lib, points)
    kappa = np.random.default_rng(0).uniform(0.1, 2.0, size=(4, lib.n_kappa))
    np.testing.assert_allclose(fm.var(kappa).value, fm(kappa), rtol=1e-12)
    with pytest.raises(DistillError):
        fm(np.ones((1, 3)))


def test_balanced_log_kappa_equalizes_term_peaks():
    lib = mech.isotropic_library()
    fm = ForwardMap(lib, ut_points([1.2, 1.8, 2.5]))
    off = fm.balanced_log_kappa(3.0)
    for i in range(lib.n_kappa):
        kappa = np.zeros(lib.n_kappa)
        kappa[i] = np.exp(off[i])
        assert np.abs(fm(kappa)).max() == pytest.approx(3.0 / 17, rel=1e-10)


def test_balanced_log_kappa_with_exponential_terms():
    lib = mech.anisotropic_library()
    F = mech.protocol_deformation("BT", 1.1, (1.0, 1.0))
    fm = ForwardMap(lib, [(F, mech.pressure_rule_for("BT"), "sigma_ff")])
    off = fm.balanced_log_kappa(2.0)
    for t in lib.terms:
        if t.inner_index is not None:
            assert off[t.inner_index] == 0.0
    assert np.all(np.isfinite(off))


# -- critic objective ----------------------------------------------------------------


def test_identical_batches_have_zero_wasserstein():
    critic = make_critic(3, hidden=[6, 6], seed=1)
    x = np.random.default_rng(1).normal(size=(10, 3))
    assert critic_loss(critic, x, x, x, 10.0).wasserstein.value == pytest.approx(0.0, abs=1e-15)


def test_unit_linear_critic_has_zero_penalty():
    critic = linear_critic([0.6, 0.8])
    x = np.random.default_rng(2).normal(size=(6, 2))
    assert critic_loss(critic, x, x + 1.0, x, 10.0).penalty.value == pytest.approx(0.0, abs=1e-15)


def test_two_point_arithmetic():
    critic = linear_critic([1.0, 2.0])
    gp = np.array([[1.0, 0.0], [0.0, 1.0]])  # f = 1, 2
    model = np.array([[0.0, 0.0], [1.0, 1.0]])  # f = 0, 3
    terms = critic_loss(critic, gp, model, gp, 10.0)
    assert terms.wasserstein.value == pytest.approx(1.5 - 1.5)
    pen = (np.sqrt(5.0) - 1.0) ** 2
    assert terms.penalty.value == pytest.approx(pen)
    assert terms.objective.value == pytest.approx(-10.0 * pen)
    np.testing.assert_allclose(terms.grad_norms, np.sqrt(5.0))
    shifted = critic_loss(critic, gp + 1.0, model, gp, 10.0)
    assert shifted.wasserstein.value == pytest.approx(3.0)


def test_one_sided_penalty_ignores_small_gradients():
    x = np.zeros((3, 2))
    small = critic_loss(linear_critic([0.3, 0.0]), x, x, x, 1.0, penalty="one-sided")
    assert small.penalty.value == 0.0
    big = critic_loss(linear_critic([3.0, 4.0]), x, x, x, 1.0, penalty="one-sided")
    assert big.penalty.value == pytest.approx(16.0)
    with pytest.raises(DistillError):
        critic_loss(linear_critic([1.0, 0.0]), x, x, x, 1.0, penalty="hinge")


def test_batch_width_mismatch():
    with pytest.raises(DistillError):
        critic_loss(make_critic(2, hidden=[4]), np.zeros((3, 2)), np.zeros((3, 3)), np.zeros((3, 2)), 1.0)


# -- flow objective --------------------------------------------------------------------


def test_constant_critic_gives_zero_flow_loss_and_gradient():
    critic = linear_critic([0.0, 0.0])
    critic.biases[0].value = np.array([3.0])
    lib = mech.library_from_config({"kind": "isotropic", "keep": ["c(0,1)", "c(1,0)"]})
    flow = randomize_flow(FlowModel(2, n_layers=2, seed=0), np.random.default_rng(0))
    u = np.random.default_rng(1).normal(size=(5, 2))
    lw = flow_loss(critic, flow, ForwardMap(lib, ut_points([1.5, 2.0])), np.ones((4, 2)), u)
    assert lw.value == 0.0
    for g in grad(lw, flow.params):
        assert np.all(g == 0.0)


def test_first_coordinate_critic():
    lam = np.array([1.5, 2.0])
    fm = ForwardMap(mech.library_from_config(NEO_HOOKE), ut_points(lam))
    flow = FlowModel(1, seed=0, init_log_kappa=np.log(0.3))
    rng = np.random.default_rng(3)
    gp = rng.normal(1.0, 0.1, size=(200, 2))
    u = rng.normal(size=(200, 1))
    lw = flow_loss(linear_critic([1.0, 0.0]), flow, fm, gp, u)
    model = fm(flow.transform(u)[0])
    assert lw.value == pytest.approx(gp[:, 0].mean() - model[:, 0].mean(), rel=1e-12)


def test_flow_loss_gradient_matches_fd():
    lib = mech.library_from_config({"kind": "isotropic", "keep": ["c(0,1)", "c(1,0)"]})
    fm = ForwardMap(lib, ut_points([1.3, 1.8, 2.4]))
    rng = np.random.default_rng(4)
    flow = randomize_flow(FlowModel(2, n_layers=3, seed=4, init_log_kappa=-1.0), rng, scale=0.5)
    critic = make_critic(3, hidden=[5, 5], seed=4)
    gp, u = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    for p in critic.params:
        p.requires_grad = False
    g = grad(flow_loss(critic, flow, fm, gp, u), flow.params)
    for k in (0, 3, 7):
        p = flow.params[k]
        idx = np.unravel_index(np.argmax(np.abs(g[k])), p.value.shape)
        e = 1e-6
        p.value[idx] += e
        up = flow_loss(critic, flow, fm, gp, u).value
        p.value[idx] -= 2 * e
        dn = flow_loss(critic, flow, fm, gp, u).value
        p.value[idx] += e
        assert g[k][idx] == pytest.approx((up - dn) / (2 * e), rel=1e-4)


def test_scaled_flow_loss_scales_linearly_for_linear_critic():
    lib = mech.library_from_config({"kind": "isotropic", "keep": ["c(0,1)", "c(1,0)"]})
    fm = ForwardMap(lib, ut_points([1.3, 2.0]))
    rng = np.random.default_rng(6)
    flow = randomize_flow(FlowModel(2, n_layers=2, seed=6), rng)
    critic = linear_critic([0.4, -1.1])
    critic.biases[0].value = np.array([2.0])
    gp, u = rng.normal(size=(7, 2)), rng.normal(size=(7, 2))
    base = flow_loss(critic, flow, fm, gp, u).value
    assert flow_loss(critic, flow, fm, 25.0 * gp, u, 25.0).value == pytest.approx(25.0 * base, rel=1e-12)


# -- training ------------------------------------------------------------------------


def toy_setup(seed, n_layers=4):
    fm = ForwardMap(mech.library_from_config(NEO_HOOKE), ut_points([2.0]))
    flow = FlowModel(1, n_layers=n_layers, seed=seed, init_log_kappa=-2.0)
    critic = make_critic(1, hidden=[16, 16], seed=seed)
    return fm, flow, critic


def gaussian_target(mean, sd):
    return lambda rng, n: rng.normal(mean, sd, size=(n, np.size(mean)))


TOY_CONFIG = dict(
    iterations=800,
    critic_iters=5,
    critic_warmup=100,
    batch_size=64,
    critic_lr=5e-3,
    flow_lr=2e-3,
    flow_decay=0.997,
    penalty="one-sided",
    log_every=20,
)


@pytest.fixture(scope="module")
def toy_runs():
    runs = []
    for seed in range(5):
        fm, flow, critic = toy_setup(seed)
        result = train(gaussian_target(1.05, 0.05), fm, flow, critic, DistillConfig(**TOY_CONFIG), seed)
        runs.append((flow, critic, result, fm))
    return runs


def test_toy_recovers_neo_hooke_coefficient(toy_runs):
    # the forward map at stretch 2 is 2c(2 - 1/4) = 3.5c, so c = 1.05 / 3.5
    c_star = 1.05 / 3.5
    for flow, *_ in toy_runs:
        kappa, _ = flow.sample(4000, 0)
        assert kappa.mean() == pytest.approx(c_star, rel=0.05)


def test_toy_flow_loss_decreases(toy_runs):
    early = np.median([np.mean([abs(h["L_W"]) for h in r.history[:5]]) for *_, r, _ in toy_runs])
    late = np.median([np.mean([abs(h["L_W"]) for h in r.history[-5:]]) for *_, r, _ in toy_runs])
    assert late < 0.2 * early


def test_toy_critic_penalty_at_convergence(toy_runs):
    rng = np.random.default_rng(9)
    for flow, critic, _, fm in toy_runs:
        gp = rng.normal(1.05, 0.05, size=(256, 1))
        model = fm(flow.sample(256, rng)[0])
        alpha = rng.uniform(size=(256, 1))
        f_hat = alpha * model + (1 - alpha) * gp
        assert critic_loss(critic, gp, model, f_hat, 10.0, penalty="one-sided").penalty.value < 0.1


def test_two_sided_penalty_at_convergence():
    lam = np.array([1.5, 2.0])
    fm = ForwardMap(mech.library_from_config(NEO_HOOKE), ut_points(lam))
    base = 2 * (lam - lam**-2)
    flow = FlowModel(1, n_layers=4, seed=0, init_log_kappa=-2.0)
    critic = make_critic(2, hidden=[16, 16], seed=0)
    target = lambda rng, n: rng.normal(0.3, 0.015, size=(n, 1)) * base
    cfg = DistillConfig(**{**TOY_CONFIG, "iterations": 500, "penalty": "two-sided", "critic_warmup": 200, "flow_decay": 0.995})
    train(target, fm, flow, critic, cfg, 0)
    rng = np.random.default_rng(10)
    gp, model = target(rng, 256), fm(flow.sample(256, rng)[0])
    alpha = rng.uniform(size=(256, 1))
    terms = critic_loss(critic, gp, model, alpha * model + (1 - alpha) * gp, 10.0)
    assert terms.penalty.value < 0.1
    assert flow.sample(4000, 0)[0].mean() == pytest.approx(0.3, rel=0.1)


def test_critic_sees_no_gap_between_identical_distributions():
    from gpdistill.diffnum import AdamW

    rng = np.random.default_rng(11)
    critic = make_critic(2, hidden=[16, 16], seed=11)
    opt = AdamW(critic.params, lr=5e-3)
    draw = lambda n: rng.normal([1.0, 2.0], [0.1, 0.3], size=(n, 2))
    for _ in range(300):
        a, b = draw(64), draw(64)
        alpha = rng.uniform(size=(64, 1))
        critic.power_iteration(1)
        terms = critic_loss(critic, a, b, alpha * a + (1 - alpha) * b, 10.0)
        opt.step(grad(-terms.objective, critic.params))
    a, b = draw(4096), draw(4096)
    fa, fb = critic.numpy_forward(a), critic.numpy_forward(b)
    se = np.sqrt(fa.var() / len(fa) + fb.var() / len(fb))
    assert abs(fa.mean() - fb.mean()) < 4 * se


def test_zero_iterations_leave_flow_unchanged():
    fm, flow, critic = toy_setup(0)
    before = flow.state()
    result = train(gaussian_target(1.0, 0.1), fm, flow, critic, DistillConfig(iterations=0, critic_warmup=50), 0)
    for k, v in flow.state().items():
        np.testing.assert_array_equal(v, before[k])
    assert result.critic_updates == 0 and result.flow_updates == 0 and result.history == []


def test_alternation_bookkeeping():
    fm, flow, critic = toy_setup(0, n_layers=2)
    calls = []
    cfg = DistillConfig(iterations=4, critic_iters=3, critic_warmup=2, batch_size=8, log_every=1)
    result = train(gaussian_target(1.0, 0.1), fm, flow, critic, cfg, 0, on_critic_step=calls.append)
    assert calls == [0, 0] + [it for it in range(1, 5) for _ in range(3)]
    assert result.critic_updates == 14 and result.flow_updates == 4
    assert [h["iteration"] for h in result.history] == [1, 2, 3, 4]


def test_training_is_deterministic():
    def run():
        fm, flow, critic = toy_setup(3, n_layers=2)
        cfg = DistillConfig(iterations=5, critic_iters=2, batch_size=8, log_every=1)
        res = train(gaussian_target(1.0, 0.1), fm, flow, critic, cfg, 7)
        return flow.state(), [h["L_W"] for h in res.history]

    (sa, la), (sb, lb) = run(), run()
    assert la == lb
    for k in sa:
        np.testing.assert_array_equal(sa[k], sb[k])


def test_divergence_aborts_with_last_good_state(tmp_path):
    fm, flow, critic = toy_setup(0, n_layers=2)
    initial = flow.state()
    cfg = DistillConfig(iterations=3, critic_iters=1, batch_size=8, divergence_threshold=1e-12, checkpoint_dir=str(tmp_path))
    with pytest.raises(DivergenceError) as info:
        train(gaussian_target(1.0, 0.1), fm, flow, critic, cfg, 0)
    err = info.value
    assert err.iteration == 1 and err.last_good_iteration == 0
    for k, v in err.last_good_state.items():
        np.testing.assert_array_equal(v, initial[k])
    assert (tmp_path / "flow_last_good.npz").exists()


def test_checkpoints_written_at_cadence(tmp_path):
    fm, flow, critic = toy_setup(0, n_layers=2)
    cfg = DistillConfig(iterations=4, critic_iters=1, batch_size=8, checkpoint_every=2, checkpoint_dir=str(tmp_path))
    result = train(gaussian_target(1.0, 0.1), fm, flow, critic, cfg, 0)
    assert len(result.checkpoints) == 2
    back = FlowModel.load(result.checkpoints[-1])
    for k, v in flow.state().items():
        np.testing.assert_array_equal(back.state()[k], v)


def test_history_csv(tmp_path):
    fm, flow, critic = toy_setup(0, n_layers=2)
    cfg = DistillConfig(iterations=6, critic_iters=1, batch_size=8, log_every=3)
    result = train(gaussian_target(1.0, 0.1), fm, flow, critic, cfg, 0)
    write_history(result.history, tmp_path / "h.csv")
    with open(tmp_path / "h.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == HISTORY_FIELDS
    assert [int(r["iteration"]) for r in rows] == [3, 6]
    for r in rows:
        assert float(r["L_L"]) == pytest.approx(float(r["wasserstein"]) - 10.0 * float(r["penalty"]))


def test_config_validation():
    bad_configs = [
        dict(iterations=-1), dict(critic_iters=0), dict(lambda_L=0.0), dict(critic_warmup=-1),
        dict(penalty="x"), dict(input_scale=0.0), dict(input_scale=float("nan")),
    ]
    for bad in bad_configs:
        with pytest.raises(DistillError):
            DistillConfig(**bad)
