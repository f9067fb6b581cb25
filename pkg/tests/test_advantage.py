import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scpo_lab.advantage import (
    AdvantageConfig,
    d_return_targets,
    discounted_returns,
    gae,
    normalize,
    subsample_zero_targets,
)
from scpo_lab.errors import ConfigError, DomainError
from scpo_lab.mmdp import augment_costs


def nested_returns(rewards, gamma, tail=0.0):
    n = len(rewards)
    return np.array(
        [sum(gamma ** (k - t) * rewards[k] for k in range(t, n)) + gamma ** (n - t) * tail for t in range(n)]
    )


def nested_gae(rewards, values, gamma, lam):
    n = len(rewards)
    deltas = [rewards[t] + gamma * values[t + 1] - values[t] for t in range(n)]
    return np.array([sum((gamma * lam) ** (k - t) * deltas[k] for k in range(t, n)) for t in range(n)])


def random_episodes(rng, n_eps, max_len=30):
    lengths = rng.integers(1, max_len + 1, n_eps)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).tolist()
    return lengths, starts


def test_config_defaults_and_validation():
    cfg = AdvantageConfig()
    assert (cfg.gamma, cfg.lam, cfg.cost_gamma, cfg.cost_lam) == (0.99, 0.97, 1.0, 0.95)
    with pytest.raises(ConfigError):
        AdvantageConfig(gamma=1.0)
    with pytest.raises(ConfigError):
        AdvantageConfig(cost_gamma=0.99)
    with pytest.raises(ConfigError):
        AdvantageConfig(lam=1.5)


def test_discounted_returns_examples():
    np.testing.assert_allclose(discounted_returns([1.0, 1.0, 1.0], 0.5), [1.75, 1.5, 1.0])
    np.testing.assert_array_equal(discounted_returns([2.5], 0.9), [2.5])


def test_discounted_returns_nested_oracle_and_no_leakage():
    rng = np.random.default_rng(0)
    lengths, starts = random_episodes(rng, 6)
    rewards = rng.standard_normal(int(lengths.sum()))
    boot = rng.standard_normal(6)
    out = discounted_returns(rewards, 0.9, starts, boot)
    for j, (s, n) in enumerate(zip(starts, lengths)):
        np.testing.assert_allclose(out[s : s + n], nested_returns(rewards[s : s + n], 0.9, boot[j]), rtol=1e-12)


def test_gae_lambda_zero_is_one_step_bitwise():
    rng = np.random.default_rng(1)
    lengths, starts = random_episodes(rng, 4)
    rewards = rng.standard_normal(int(lengths.sum()))
    values = rng.standard_normal(len(rewards) + 4)
    out = gae(rewards, values, 0.99, 0.0, starts)
    for j, (s, n) in enumerate(zip(starts, lengths)):
        v = values[s + j : s + j + n + 1]
        np.testing.assert_array_equal(out[s : s + n], rewards[s : s + n] + 0.99 * v[1:] - v[:-1])


def test_gae_lambda_one_zero_values_is_return():
    rewards = np.array([1.0, -0.5, 2.0, 0.3])
    out = gae(rewards, np.zeros(5), 0.9, 1.0)
    np.testing.assert_allclose(out, nested_returns(rewards, 0.9), rtol=1e-12)


@pytest.mark.parametrize("lam", [0.0, 0.5, 0.97, 1.0])
def test_gae_nested_oracle(lam):
    rng = np.random.default_rng(2)
    lengths, starts = random_episodes(rng, 5)
    rewards = rng.standard_normal(int(lengths.sum()))
    values = rng.standard_normal(len(rewards) + 5)
    out = gae(rewards, values, 0.95, lam, starts)
    for j, (s, n) in enumerate(zip(starts, lengths)):
        expected = nested_gae(rewards[s : s + n], values[s + j : s + j + n + 1], 0.95, lam)
        np.testing.assert_allclose(out[s : s + n], expected, rtol=1e-10, atol=1e-12)


def test_gae_length_mismatch():
    with pytest.raises(DomainError):
        gae(np.zeros(4), np.zeros(4), 0.9, 0.9)


def test_bad_segments():
    with pytest.raises(DomainError):
        discounted_returns(np.zeros(4), 0.9, [0, 2, 2])


def test_d_return_examples():
    np.testing.assert_allclose(d_return_targets([0.1, 0.2, 0.0]), [0.3, 0.2, 0.0])
    np.testing.assert_array_equal(d_return_targets(np.zeros(5)), np.zeros(5))
    with pytest.raises(DomainError):
        d_return_targets([0.1, -0.01])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 2.0), min_size=1, max_size=60))
def test_d_returns_equal_future_max_minus_tag(costs):
    tags, incs = augment_costs(costs)
    targets = d_return_targets(incs)
    future_max = np.array([max(costs[t:]) for t in range(len(costs))])
    np.testing.assert_allclose(targets, np.maximum(future_max, tags) - tags, atol=1e-9)
    assert np.all(np.diff(targets) <= 1e-12)
    peak = int(np.argmax(costs))
    np.testing.assert_allclose(targets[peak + 1 :], 0.0, atol=0)


def test_d_returns_respect_episode_boundaries():
    out = d_return_targets([0.1, 0.2, 0.5, 0.0], starts=[0, 2])
    np.testing.assert_allclose(out, [0.3, 0.2, 0.5, 0.0])


def test_normalize():
    x = np.array([1.0, 2.0, 4.0, 7.0])
    z = normalize(x)
    assert z.mean() == pytest.approx(0.0, abs=1e-15)
    assert z.std() == pytest.approx(1.0)
    assert np.argmax(z) == np.argmax(x)
    np.testing.assert_array_equal(normalize(np.full(3, 2.0)), 0.0)


@pytest.mark.parametrize(
    "n_zero, n_nonzero, kept_zero",
    [(90, 10, 10), (5, 10, 5), (100, 0, 1), (0, 7, 0)],
)
def test_subsample_counts(n_zero, n_nonzero, kept_zero):
    rng = np.random.default_rng(3)
    targets = np.concatenate([np.zeros(n_zero), rng.uniform(0.1, 1.0, n_nonzero)])
    perm = rng.permutation(len(targets))
    targets = targets[perm]
    obs = np.arange(len(targets), dtype=float)[:, None]
    x, y, idx = subsample_zero_targets(obs, targets, np.random.default_rng(4))
    assert np.sum(y == 0) == kept_zero
    assert np.sum(y != 0) == n_nonzero
    assert np.all(np.diff(idx) > 0)
    np.testing.assert_array_equal(x[:, 0], idx)


def test_subsample_empty_and_seeded():
    x, y, idx = subsample_zero_targets(np.zeros((0, 2)), np.zeros(0), np.random.default_rng(0))
    assert len(x) == len(y) == len(idx) == 0
    targets = np.concatenate([np.zeros(50), np.ones(5)])
    obs = np.zeros((55, 1))
    a = subsample_zero_targets(obs, targets, np.random.default_rng(7))[2]
    b = subsample_zero_targets(obs, targets, np.random.default_rng(7))[2]
    np.testing.assert_array_equal(a, b)
