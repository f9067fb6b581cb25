import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scpo_lab import checks
from scpo_lab.errors import DomainError
from scpo_lab.neural import (
    LOG_2PI,
    Adam,
    GaussianPolicy,
    Mlp,
    ValueFunction,
    adam_fit,
    diag_gaussian_kl,
    kl_diag_gaussian,
    load_policy,
    load_snapshot,
    policy_snapshot,
    value_snapshot,
)


def test_zero_weight_net_outputs_zero():
    net = Mlp([3, 5, 2])
    np.testing.assert_array_equal(net.forward(np.array([1.0, -2.0, 3.0])), [0.0, 0.0])


def test_identity_linear_layer():
    net = Mlp([3, 3])
    net.set_flat(np.concatenate([np.eye(3).ravel(), np.zeros(3)]))
    x = np.array([0.3, -1.2, 4.0])
    np.testing.assert_array_equal(net.forward(x), x)


def test_forward_matches_straight_line_recomputation():
    rng = np.random.default_rng(0)
    net = Mlp([4, 6, 5, 2], rng)
    x = rng.standard_normal((7, 4))
    th = net.get_flat()
    # layout: W1 (4x6), b1, W2 (6x5), b2, W3 (5x2), b3
    i = 0
    params = []
    for fan_in, fan_out in [(4, 6), (6, 5), (5, 2)]:
        w = th[i : i + fan_in * fan_out].reshape(fan_in, fan_out)
        i += fan_in * fan_out
        params.append((w, th[i : i + fan_out]))
        i += fan_out
    out = np.empty((7, 2))
    for n in range(7):
        h = x[n]
        for k, (w, b) in enumerate(params):
            z = np.array([sum(h[a] * w[a, j] for a in range(len(h))) + b[j] for j in range(w.shape[1])])
            h = z if k == 2 else np.array([math.tanh(v) for v in z])
        out[n] = h
    np.testing.assert_allclose(net.forward(x), out, rtol=1e-12, atol=1e-12)


def test_forward_size_mismatch():
    with pytest.raises(DomainError):
        Mlp([3, 2]).forward(np.zeros(4))
    with pytest.raises(DomainError):
        Mlp([3])


def test_flat_round_trip():
    rng = np.random.default_rng(1)
    pol = GaussianPolicy(5, 2, (8,), rng)
    flat = pol.get_flat()
    pol.set_flat(flat)
    np.testing.assert_array_equal(pol.get_flat(), flat)
    with pytest.raises(DomainError):
        pol.set_flat(flat[:-1])


def test_policy_initialization_defaults():
    pol = GaussianPolicy(5, 2, (64, 64), np.random.default_rng(0))
    np.testing.assert_array_equal(pol.log_std, [-0.5, -0.5])
    # small output layer keeps the initial mean near zero
    assert np.max(np.abs(pol.mean(np.random.default_rng(1).standard_normal((10, 5))))) < 0.1


def test_score_at_the_mode():
    rng = np.random.default_rng(2)
    pol = checks._small_policy(rng)
    obs = rng.standard_normal(4)
    g = pol.grad_log_prob(obs, pol.mean(obs))
    g_mean, g_log_std = pol.split(g)
    np.testing.assert_allclose(g_mean, 0.0, atol=1e-14)
    np.testing.assert_allclose(g_log_std, -1.0)


@pytest.mark.parametrize("seed", range(5))
def test_grad_log_prob_finite_difference(seed):
    rng = np.random.default_rng(seed)
    pol = checks._small_policy(rng)
    obs, act = rng.standard_normal(4), rng.standard_normal(2)
    numeric = checks.central_difference(lambda th: float(pol.log_prob(obs, act, th)), pol.get_flat())
    assert checks.relative_error(pol.grad_log_prob(obs, act), numeric) <= 1e-4


def test_log_std_shift_matches_gaussian_formula():
    rng = np.random.default_rng(3)
    pol = checks._small_policy(rng)
    obs, act = rng.standard_normal(4), rng.standard_normal(2)
    mu = pol.mean(obs)
    for shift in (-0.7, 0.0, 0.4):
        flat = pol.get_flat()
        flat[-2:] += shift
        log_std = pol.log_std + shift
        expected = float(
            np.sum(-0.5 * ((act - mu) / np.exp(log_std)) ** 2 - log_std) - LOG_2PI
        )
        assert float(pol.log_prob(obs, act, flat)) == pytest.approx(expected, rel=1e-12)
    # derivative with respect to log_std: z^2 - 1 per dimension
    z2 = ((act - mu) / np.exp(pol.log_std)) ** 2
    np.testing.assert_allclose(pol.split(pol.grad_log_prob(obs, act))[1], z2 - 1.0, rtol=1e-12)


def test_weighted_gradient_is_sum_of_scores():
    rng = np.random.default_rng(4)
    pol = checks._small_policy(rng)
    obs, act, w = rng.standard_normal((6, 4)), rng.standard_normal((6, 2)), rng.standard_normal(6)
    total = sum(w[i] * pol.grad_log_prob(obs[i], act[i]) for i in range(6))
    np.testing.assert_allclose(pol.grad_weighted_log_prob(obs, act, w), total, rtol=1e-10, atol=1e-12)


def test_sampling_is_reproducible_and_density_consistent():
    pol = checks._small_policy(np.random.default_rng(5))
    obs = np.random.default_rng(6).standard_normal(4)
    a1, lp1 = pol.sample(obs, np.random.default_rng(9))
    a2, lp2 = pol.sample(obs, np.random.default_rng(9))
    np.testing.assert_array_equal(a1, a2)
    assert lp1 == lp2
    assert lp1 == pytest.approx(float(pol.log_prob(obs, a1)), rel=1e-12)


def test_kl_identical_is_zero():
    rng = np.random.default_rng(7)
    pol = checks._small_policy(rng)
    obs = rng.standard_normal((20, 4))
    assert kl_diag_gaussian(pol, pol, obs) == 0.0


def test_kl_mean_shift_closed_form():
    mu_p = np.array([[0.0, 0.0], [1.0, 2.0]])
    d = np.array([[0.3, -0.4], [1.0, 0.0]])
    kl = diag_gaussian_kl(mu_p + d, np.zeros(2), mu_p, np.zeros(2))
    np.testing.assert_allclose(kl, 0.5 * np.sum(d * d, axis=1), rtol=1e-14)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(8)
    mu_p, ls_p = rng.standard_normal(2), rng.uniform(-0.5, 0.3, 2)
    mu_q, ls_q = rng.standard_normal(2), rng.uniform(-0.5, 0.3, 2)
    x = mu_p + np.exp(ls_p) * rng.standard_normal((200_000, 2))

    def logpdf(x, mu, ls):
        return np.sum(-0.5 * ((x - mu) / np.exp(ls)) ** 2 - ls - 0.5 * LOG_2PI, axis=1)

    samples = logpdf(x, mu_p, ls_p) - logpdf(x, mu_q, ls_q)
    est, err = samples.mean(), samples.std() / math.sqrt(len(samples))
    exact = float(diag_gaussian_kl(mu_p, ls_p, mu_q, ls_q))
    assert abs(est - exact) <= 3 * err


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kl_is_non_negative(seed):
    rng = np.random.default_rng(seed)
    new, old = checks._small_policy(rng), checks._small_policy(rng)
    assert kl_diag_gaussian(new, old, rng.standard_normal((5, 4))) >= 0.0


def test_kl_dimension_mismatch():
    with pytest.raises(DomainError):
        kl_diag_gaussian(GaussianPolicy(3, 2, (4,)), GaussianPolicy(3, 3, (4,)), np.zeros((1, 3)))


def test_fvp_linearity_and_damping():
    rng = np.random.default_rng(9)
    pol = checks._small_policy(rng)
    obs = rng.standard_normal((10, 4))
    v = rng.standard_normal(pol.n_params)
    np.testing.assert_array_equal(pol.fisher_vector_product(obs, np.zeros(pol.n_params)), 0.0)
    diff = pol.fisher_vector_product(obs, v, damping=0.3) - pol.fisher_vector_product(obs, v)
    np.testing.assert_allclose(diff, 0.3 * v, rtol=1e-12, atol=1e-14)
    with pytest.raises(DomainError):
        pol.fisher_vector_product(obs, v[:-1])


def test_fvp_is_positive_semidefinite():
    rng = np.random.default_rng(10)
    pol = checks._small_policy(rng)
    obs = rng.standard_normal((10, 4))
    for _ in range(10):
        v = rng.standard_normal(pol.n_params)
        assert v @ pol.fisher_vector_product(obs, v, damping=0.01) > 0


def test_value_grad_finite_difference():
    assert checks.check_value_grad(points=5).ok


def test_adam_fits_constant_targets():
    rng = np.random.default_rng(11)
    vf = ValueFunction(3, (64, 64), rng)
    x = rng.standard_normal((64, 3))
    trace = adam_fit(vf, x, np.full(64, 0.5))  # defaults: 80 iterations, lr 1e-3
    assert len(trace) == 80
    assert vf.mse(x, np.full(64, 0.5)) < 1e-2 * trace[0]
    assert np.mean(np.diff(trace) <= 0) >= 0.9


def test_adam_fits_linear_targets_with_linear_net():
    rng = np.random.default_rng(12)
    vf = ValueFunction(3, (), rng)  # no hidden layers: a linear model
    x = rng.standard_normal((128, 3))
    y = x @ np.array([0.5, -1.0, 2.0]) + 0.3
    trace = adam_fit(vf, x, y, iterations=2000, lr=1e-2)
    assert trace[-1] < 1e-12
    assert np.mean(np.diff(trace) <= 0) >= 0.9


def test_adam_fit_rejects_bad_batches():
    vf = ValueFunction(3, (4,), np.random.default_rng(0))
    with pytest.raises(DomainError):
        adam_fit(vf, np.zeros((0, 3)), np.zeros(0))
    with pytest.raises(DomainError):
        adam_fit(vf, np.zeros((4, 3)), np.zeros(3))


def test_adam_single_step():
    opt = Adam(lr=0.1)
    out = opt.step(np.array([1.0, -1.0]), np.array([2.0, -0.5]))
    # first bias-corrected step has magnitude lr in each coordinate
    np.testing.assert_allclose(out, [0.9, -0.9], rtol=1e-7)


def test_snapshot_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    pol = GaussianPolicy(5, 2, (8, 8), rng)
    pol.log_std = np.array([-0.3, 0.1])
    policy_snapshot(pol, tmp_path / "p.bin")
    back = load_policy(tmp_path / "p.bin")
    np.testing.assert_array_equal(back.get_flat(), pol.get_flat())
    header, _ = load_snapshot(tmp_path / "p.bin")
    assert header["layer_sizes"] == [5, 8, 8, 2]
    assert header["log_std"] == [-0.3, 0.1]

    vf = ValueFunction(5, (8,), rng)
    value_snapshot(vf, tmp_path / "v.bin")
    header, flat = load_snapshot(tmp_path / "v.bin")
    assert header["kind"] == "value"
    np.testing.assert_array_equal(flat, vf.net.theta)


def test_snapshot_rejects_other_files(tmp_path):
    (tmp_path / "junk.bin").write_bytes(b"nope")
    with pytest.raises(DomainError):
        load_snapshot(tmp_path / "junk.bin")
