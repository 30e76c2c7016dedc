import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from funcspace import optim
from funcspace.errors import ConfigError, DivergenceError, ShapeError
from funcspace.nn import Batch, forward, init_network, loss_and_grad
from funcspace.optim import (
    AdamConfig,
    AdamState,
    FisherOperator,
    HcgdConfig,
    HcgdState,
    NgdConfig,
    NgdState,
    SgdConfig,
    SgdState,
    ValidationSampler,
    fisher_vector_product,
    hcgd_step,
    l2_penalty_grad,
    ngd_by_gd_step,
    ngd_correct,
    sgd_step,
)

from conftest import assert_grad_close, central_diff, random_problem


def _data(seed=0, n=64, d=5, k=3):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    y = (x[:, 0] > 0).astype(int) + (x[:, 1] > 0.5).astype(int)
    return x, np.minimum(y, k - 1)


def _batches(x, y, size, steps, seed):
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = rng.choice(len(x), size, replace=False)
        yield Batch(x[idx], y[idx])


# SGD ---------------------------------------------------------------------------------


def test_sgd_zero_lr_keeps_params():
    net, batch = random_problem(0)
    before = net.params.copy()
    sgd_step(net, batch, SgdConfig(lr=0.0, momentum=0.5, weight_decay=0.1), SgdState.zeros(net.n_params))
    assert np.array_equal(before, net.params)


def test_sgd_plain_step():
    net, batch = random_problem(1)
    _, J = loss_and_grad(net, batch)
    expected = net.params - 0.3 * J
    sgd_step(net, batch, SgdConfig(lr=0.3), SgdState.zeros(net.n_params))
    np.testing.assert_allclose(net.params, expected, rtol=0, atol=1e-15)


def test_sgd_matches_reference_loop():
    x, y = _data()
    net = init_network([5, 8, 3], seed=2)
    ref_theta = net.params.copy()
    ref_buf = None
    cfg = SgdConfig(lr=0.05, momentum=0.9, weight_decay=1e-3)
    state = SgdState.zeros(net.n_params)
    probe = init_network([5, 8, 3], seed=2)
    for batch in _batches(x, y, 16, 100, seed=3):
        # reference: torch.optim.SGD semantics written out by hand
        probe.params = ref_theta
        _, g = loss_and_grad(probe, batch)
        d = g + 1e-3 * ref_theta
        ref_buf = d * 0.05 if ref_buf is None else 0.9 * ref_buf + 0.05 * d
        ref_theta = ref_theta - ref_buf
        sgd_step(net, batch, cfg, state)
    np.testing.assert_allclose(net.params, ref_theta, rtol=0, atol=1e-12)


def test_sgd_config_validation():
    with pytest.raises(ConfigError):
        SgdConfig(lr=0.1, momentum=1.0)
    with pytest.raises(ConfigError):
        SgdConfig(lr=-1)


# Adam --------------------------------------------------------------------------------


def test_adam_zero_gradient_stream():
    state = AdamState.zeros(4)
    for _ in range(5):
        assert np.all(optim.adam_delta(np.zeros(4), AdamConfig(), state) == 0)


def test_adam_first_step_is_signed_lr():
    g = np.array([3.0, -0.2, 1e-3, -50.0])
    delta = optim.adam_delta(g, AdamConfig(lr=1e-3), AdamState.zeros(4))
    np.testing.assert_allclose(delta, -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_step_deterministic():
    x, y = _data(1)
    nets = []
    for _ in range(2):
        net = init_network([5, 6, 3], seed=4)
        state = AdamState.zeros(net.n_params)
        for batch in _batches(x, y, 8, 20, seed=5):
            optim.adam_step(net, batch, 1e-2, state)
        nets.append(net.params)
    assert np.array_equal(*nets)


# L2 penalty --------------------------------------------------------------------------


def test_penalty_at_zero_displacement():
    net, batch = random_problem(0)
    ref = forward(net, batch)
    pen, g = l2_penalty_grad(net, ref, batch.inputs, 0.5)
    assert pen == pytest.approx(0.5 * np.sqrt(1e-12))
    assert np.all(g == 0)


@pytest.mark.parametrize("seed", range(5))
def test_penalty_grad_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = init_network([3, 4, 3], seed=seed)
    assert net.n_params == 31
    x = rng.normal(size=(10, 3))
    ref = forward(net, x)
    theta = net.params + rng.normal(scale=0.3, size=31)
    _, g = l2_penalty_grad(net, ref, x, 0.7, params=theta)
    fd = central_diff(lambda p: l2_penalty_grad(net, ref, x, 0.7, params=p)[0], theta)
    assert_grad_close(g, fd)


def test_penalty_homogeneous_in_lambda():
    net, batch = random_problem(3)
    ref = forward(net, batch) * 0.9 + 0.1 / 3
    p1, g1 = l2_penalty_grad(net, ref, batch.inputs, 0.4)
    p2, g2 = l2_penalty_grad(net, ref, batch.inputs, 0.8)
    assert p2 == 2 * p1
    assert np.array_equal(g2, 2 * g1)


def test_penalty_shape_error():
    net, batch = random_problem(0)
    with pytest.raises(ShapeError):
        l2_penalty_grad(net, np.zeros((3, 3)), batch.inputs, 1.0)


# HCGD --------------------------------------------------------------------------------


def _run(opt_factory, steps=30, seed=7):
    x, y = _data(seed, n=128)
    net = init_network([5, 10, 3], seed=seed)
    opt = opt_factory(net, x)
    for batch in _batches(x, y, 16, steps, seed=seed + 1):
        opt.step(net, batch)
    return net.params


def test_hcgd_with_zero_lambda_is_sgd():
    sgd = _run(lambda net, x: optim.SGD(net.n_params, SgdConfig(0.1, 0.9)))
    hc = _run(lambda net, x: optim.HCGD(net.n_params, HcgdConfig(lr=0.1, momentum=0.9, lam=0.0, val_batch_size=32), ValidationSampler(x, 0)))
    assert np.array_equal(sgd, hc)


@pytest.mark.parametrize("n", [1, 3])
def test_hcgd_with_zero_inner_lr_is_sgd(n):
    sgd = _run(lambda net, x: optim.SGD(net.n_params, SgdConfig(0.1, 0.9)))
    hc = _run(lambda net, x: optim.HCGD(net.n_params, HcgdConfig(lr=0.1, momentum=0.9, inner_lr=0.0, n_corrections=n, val_batch_size=32), ValidationSampler(x, 0)))
    assert np.array_equal(sgd, hc)


def test_hcgd_single_correction_matches_algorithm():
    x, y = _data(2, n=64)
    net = init_network([5, 7, 3], seed=1)
    batch = Batch(x[:16], y[:16])
    val = x[16:48]
    cfg = HcgdConfig(lr=0.1, momentum=0.0, lam=0.5, inner_lr=0.02, val_batch_size=32)
    theta = net.params.copy()
    _, J = loss_and_grad(net, batch)
    d0 = -0.1 * J
    ref = forward(net, val)
    _, g = l2_penalty_grad(net, ref, val, 0.5, params=theta + d0)
    expected = theta + d0 - 0.02 * g
    state = HcgdState.zeros(net.n_params)
    hcgd_step(net, batch, ValidationSampler(val, 0), cfg, state)
    np.testing.assert_allclose(net.params, expected, rtol=0, atol=1e-14)
    # velocity holds the negated final update
    np.testing.assert_allclose(state.velocity, -(expected - theta), atol=1e-15)


def test_hcgd_extra_corrections_include_gradient():
    x, y = _data(3, n=64)
    net = init_network([5, 6, 3], seed=3)
    batch = Batch(x[:16], y[:16])
    val = x[16:48]
    cfg = HcgdConfig(lr=0.1, momentum=0.0, lam=0.5, inner_lr=0.02, n_corrections=2, val_batch_size=32,
                     fresh_val_per_correction=False)
    theta = net.params.copy()
    _, J = loss_and_grad(net, batch)
    ref = forward(net, val)
    d = -0.1 * J
    _, g = l2_penalty_grad(net, ref, val, 0.5, params=theta + d)
    d = d - 0.02 * g
    _, g = l2_penalty_grad(net, ref, val, 0.5, params=theta + d)
    d = d - 0.02 * (g + J)
    hcgd_step(net, batch, ValidationSampler(val, 0), cfg, HcgdState.zeros(net.n_params))
    np.testing.assert_allclose(net.params, theta + d, rtol=0, atol=1e-14)


def _objective_setup(seed):
    x, y = _data(seed, n=96)
    net = init_network([5, 8, 3], seed=seed)
    batch = Batch(x[:32], y[:32])
    val = x[32:96]
    _, J = loss_and_grad(net, batch)
    return net, batch, val, J


@pytest.mark.parametrize("seed", range(5))
def test_hcgd_first_correction_shrinks_functional_change(seed):
    # the first correction follows the penalty gradient alone
    net, batch, val, J = _objective_setup(seed)
    theta = net.params.copy()
    d0 = -0.1 * J
    ref = forward(net, val)
    cfg = HcgdConfig(lr=0.1, momentum=0.0, lam=0.5, inner_lr=1e-4, val_batch_size=64)
    hcgd_step(net, batch, ValidationSampler(val, 0), cfg, HcgdState.zeros(net.n_params))
    d1 = net.params - theta
    dist = lambda d: np.sqrt(np.mean(np.sum((forward(net, val, params=theta + d) - ref) ** 2, axis=1)))
    assert dist(d1) < dist(d0)


@pytest.mark.parametrize("seed", range(5))
def test_hcgd_later_corrections_lower_linearized_objective(seed):
    # corrections after the first step along J + penalty gradient, i.e. true
    # gradient descent on J.delta + lam * distance
    net, batch, val, J = _objective_setup(seed)
    theta = net.params.copy()
    objs = []
    for n in (1, 2, 3):
        net.params = theta.copy()
        cfg = HcgdConfig(lr=0.1, momentum=0.0, lam=0.5, inner_lr=1e-4, n_corrections=n, val_batch_size=64,
                         fresh_val_per_correction=False)
        hcgd_step(net, batch, ValidationSampler(val, 0), cfg, HcgdState.zeros(net.n_params))
        d = net.params - theta
        net.params = theta.copy()
        objs.append(optim.hcgd_objective(net, J, d, val, 0.5))
    assert objs[2] < objs[1] < objs[0]


@pytest.mark.parametrize("n", [1, 2, 3])
def test_hcgd_pass_count(n):
    x, y = _data(4, n=256)
    net = init_network([5, 6, 3], seed=0)
    cfg = HcgdConfig(n_corrections=n, val_batch_size=32)
    info = hcgd_step(net, Batch(x[:16], y[:16]), ValidationSampler(x, 0), cfg, HcgdState.zeros(net.n_params))
    assert info.passes == 2 + 3 * n


def test_hcgd_fixed_validation_reuses_reference():
    x, y = _data(4, n=256)
    net = init_network([5, 6, 3], seed=0)
    cfg = HcgdConfig(n_corrections=3, val_batch_size=32, fresh_val_per_correction=False)
    info = hcgd_step(net, Batch(x[:16], y[:16]), ValidationSampler(x, 0), cfg, HcgdState.zeros(net.n_params))
    assert info.passes == 2 + 3 + 2 * 2


def test_hcgd_adam_proposal():
    x, y = _data(5, n=64)
    net = init_network([5, 6, 3], seed=0)
    theta = net.params.copy()
    batch = Batch(x[:16], y[:16])
    cfg = HcgdConfig(proposal="adam", inner_lr=0.0)
    state = HcgdState.zeros(net.n_params)
    hcgd_step(net, batch, ValidationSampler(x, 0), cfg, state)
    _, J = loss_and_grad(init_network([5, 6, 3], seed=0), batch)
    expected = theta + optim.adam_delta(J, AdamConfig(), AdamState.zeros(net.n_params))
    np.testing.assert_allclose(net.params, expected, atol=1e-15)
    assert np.all(state.velocity == 0)


def test_lambda_continuity():
    sgd = _run(lambda net, x: optim.SGD(net.n_params, SgdConfig(0.1, 0.9)), steps=100)
    gaps = []
    for lam_eta in [1e-2, 1e-3, 1e-4, 1e-5]:
        hc = _run(lambda net, x: optim.HCGD(
            net.n_params, HcgdConfig(lr=0.1, momentum=0.9, lam=0.5, inner_lr=lam_eta / 0.5, val_batch_size=32),
            ValidationSampler(x, 0)), steps=100)
        gaps.append(np.abs(hc - sgd).max())
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-3 * gaps[0]


def test_validation_sampler_cycles():
    s = ValidationSampler(np.arange(10.0)[:, None], seed=0)
    seen = np.concatenate([s.draw(4) for _ in range(2)])
    assert len(np.unique(seen)) == 8
    again = s.draw(4)  # only 2 left: reshuffle
    assert len(again) == 4


def test_hcgd_config_validation():
    with pytest.raises(ConfigError):
        HcgdConfig(n_corrections=0)
    with pytest.raises(ConfigError):
        HcgdConfig(proposal="lbfgs")


# Fisher / NGD -------------------------------------------------------------------------


def test_fvp_zero_vector():
    F = FisherOperator(np.random.default_rng(0).normal(size=(6, 3)))
    assert np.all(fisher_vector_product(F, np.zeros(6)) == 0)


def test_fvp_rank_one():
    g = np.array([1.0, -2.0, 0.5])
    v = np.array([0.3, 0.1, -4.0])
    F = FisherOperator(g[:, None])
    np.testing.assert_allclose(fisher_vector_product(F, v), g * (g @ v), rtol=1e-15)


def test_fvp_dense_oracle():
    rng = np.random.default_rng(1)
    G = rng.normal(size=(20, 5))
    v = rng.normal(size=20)
    dense = (G @ G.T / 5) @ v
    assert np.abs(fisher_vector_product(FisherOperator(G), v) - dense).max() < 1e-12


def test_fvp_length_error():
    with pytest.raises(ShapeError):
        fisher_vector_product(FisherOperator(np.ones((3, 2))), np.ones(4))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), p=st.integers(1, 30), n=st.integers(1, 10))
def test_fisher_psd(seed, p, n):
    rng = np.random.default_rng(seed)
    F = FisherOperator(rng.normal(size=(p, n)) * rng.uniform(0.01, 100))
    v = rng.normal(size=p)
    assert v @ fisher_vector_product(F, v) >= -1e-12


def test_fisher_from_network_psd():
    net, batch = random_problem(0, n=9)
    for mode in ("empirical", "sampled"):
        F = FisherOperator.from_network(net, batch, mode, seed=1)
        v = np.random.default_rng(2).normal(size=net.n_params)
        assert v @ F.apply(v) >= -1e-12


def _tiny_problem(seed=0):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(5, 8))
    J = rng.normal(size=5)
    return FisherOperator(G), J


def test_ngd_correction_converges_to_dense_solve():
    F, J = _tiny_problem()
    lam = 2.0
    top = np.linalg.eigvalsh(F.dense()).max()
    eta = 1.0 / (lam * top)
    delta, res = ngd_correct(np.zeros(5), J, F, lam, eta, 5000)
    target = -np.linalg.solve(F.dense(), J) / lam
    assert np.abs(delta - target).max() < 1e-6
    assert res[-1] < 1e-8


def test_ngd_divergence_detected():
    F, J = _tiny_problem(1)
    lam = 1.0
    top = np.linalg.eigvalsh(F.dense()).max()
    with pytest.raises(DivergenceError) as exc:
        ngd_correct(np.zeros(5), J, F, lam, 2.2 / (lam * top), 200)
    assert exc.value.residuals[-1] > exc.value.residuals[-2]


def test_power_iteration_eigenvalue():
    F, _ = _tiny_problem(2)
    assert optim.fisher_max_eigenvalue(F, iters=500) == pytest.approx(np.linalg.eigvalsh(F.dense()).max(), rel=1e-8)


def test_ngd_zero_corrections_is_proposer():
    net, batch = random_problem(2)
    theta = net.params.copy()
    ngd_by_gd_step(net, batch, NgdConfig(n_corrections=0, lr=0.01), NgdState.zeros(net.n_params))
    _, J = loss_and_grad(net, batch, params=theta)
    expected = theta + optim.rmsprop_delta(J, optim.RmspropConfig(lr=0.01), optim.RmspropState.zeros(len(J)))
    np.testing.assert_allclose(net.params, expected, atol=1e-15)


def test_ngd_step_on_network_moves_towards_natural_gradient():
    net, batch = random_problem(4, dims=(3, 4, 3), n=40)
    theta = net.params.copy()
    _, J = loss_and_grad(net, batch)
    F = FisherOperator.from_network(net, batch)
    lam = 1.0
    eta = 1.0 / (lam * optim.fisher_max_eigenvalue(F, 300))
    cfg = NgdConfig(inner_lr=eta, lam=lam, n_corrections=50, lr=1e-3)
    ngd_by_gd_step(net, batch, cfg, NgdState.zeros(net.n_params))
    delta = net.params - theta
    before = np.linalg.norm(J + lam * F.apply(optim.rmsprop_delta(J, optim.RmspropConfig(1e-3), optim.RmspropState.zeros(len(J)))))
    after = np.linalg.norm(J + lam * F.apply(delta))
    assert after < before


def test_ngd_divergence_leaves_params():
    net, batch = random_problem(5, n=12)
    theta = net.params.copy()
    with pytest.raises(DivergenceError):
        ngd_by_gd_step(net, batch, NgdConfig(inner_lr=1e4, n_corrections=50), NgdState.zeros(net.n_params))
    assert np.array_equal(theta, net.params)


def test_ngd_sampled_mode_reproducible():
    outs = []
    for _ in range(2):
        net, batch = random_problem(6, n=10)
        opt = optim.NGD(net.n_params, NgdConfig(fisher_mode="sampled", n_corrections=3, inner_lr=0.01), seed=3)
        for _ in range(5):
            opt.step(net, batch)
        outs.append(net.params)
    assert np.array_equal(*outs)


def test_optimizers_keep_params_finite():
    x, y = _data(8, n=128)
    for make in (
        lambda n: optim.SGD(n, SgdConfig(0.1, 0.9, 1e-4)),
        lambda n: optim.Adam(n),
        lambda n: optim.HCGD(n, HcgdConfig(val_batch_size=32, n_corrections=2), ValidationSampler(x, 0)),
        lambda n: optim.NGD(n, NgdConfig(inner_lr=0.05, n_corrections=3)),
    ):
        net = init_network([5, 10, 3], seed=0)
        opt = make(net.n_params)
        for batch in _batches(x, y, 16, 50, seed=1):
            info = opt.step(net, batch)
        assert np.all(np.isfinite(net.params)) and np.isfinite(info.loss)


def test_scale_lr_hook():
    opt = optim.SGD(3, SgdConfig(0.1))
    opt.scale_lr(0.1)
    assert opt.cfg.lr == pytest.approx(0.01)
