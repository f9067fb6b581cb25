"""Return targets and advantage estimates.

All functions take a flat batch plus episode boundaries.  ``starts`` lists
the index where each episode begins, in order; the batch length closes the
last one.  Nothing is allowed to leak across a boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scpo_lab.errors import ConfigError, DomainError


@dataclass(frozen=True)
class AdvantageConfig:
    gamma: float = 0.99
    lam: float = 0.97
    cost_gamma: float = 1.0
    cost_lam: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0 or not 0.0 <= self.cost_lam <= 1.0:
            raise ConfigError("lam and cost_lam must lie in [0, 1]")
        if self.cost_gamma != 1.0:
            raise ConfigError("cost-increment returns are undiscounted; cost_gamma must be 1")


def segments(n: int, starts):
    starts = list(starts) if starts is not None else [0]
    ends = starts[1:] + [n]
    for s, e in zip(starts, ends):
        if e <= s:
            raise DomainError(f"empty or unordered episode segment [{s}, {e})")
        yield s, e


def discount_cumsum(x, discount: float) -> np.ndarray:
    """``y[t] = sum_k discount**k * x[t + k]`` over a single segment."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    acc = 0.0
    for t in range(len(x) - 1, -1, -1):
        acc = x[t] + discount * acc
        out[t] = acc
    return out


def discounted_returns(rewards, gamma: float, starts=None, bootstrap=None) -> np.ndarray:
    """Reward-to-go per episode.

    ``bootstrap[j]`` is the value appended after episode j (0 for a real
    episode end, ``V(s_T)`` for one cut short by the batch boundary).
    """
    rewards = np.asarray(rewards, dtype=float)
    out = np.empty_like(rewards)
    for j, (s, e) in enumerate(segments(len(rewards), starts)):
        tail = 0.0 if bootstrap is None else float(bootstrap[j])
        out[s:e] = discount_cumsum(np.append(rewards[s:e], tail), gamma)[:-1]
    return out


def gae(rewards, values, gamma: float, lam: float, starts=None) -> np.ndarray:
    """Lambda-weighted sums of TD residuals.

    ``values`` carries one extra entry per episode: the bootstrap value after
    its last step.  With ``lam == 0`` this is exactly ``r + gamma V' - V``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    seg = list(segments(len(rewards), starts))
    if len(values) != len(rewards) + len(seg):
        raise DomainError(
            f"values must have len(rewards) + n_episodes = {len(rewards) + len(seg)} entries, got {len(values)}"
        )
    out = np.empty_like(rewards)
    for j, (s, e) in enumerate(seg):
        v = values[s + j : e + j + 1]
        deltas = rewards[s:e] + gamma * v[1:] - v[:-1]
        out[s:e] = deltas if lam == 0.0 else discount_cumsum(deltas, gamma * lam)
    return out


def d_return_targets(increments, starts=None) -> np.ndarray:
    """Undiscounted suffix sums of cost increments (targets for the increment value)."""
    increments = np.asarray(increments, dtype=float)
    if np.any(increments < 0):
        raise DomainError("cost increments must be non-negative")
    out = np.empty_like(increments)
    for s, e in segments(len(increments), starts):
        out[s:e] = np.cumsum(increments[s:e][::-1])[::-1]
    return out


def normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    std = x.std()
    return (x - x.mean()) / (std if std > 0 else 1.0)


def subsample_zero_targets(obs, targets, rng: np.random.Generator):
    """Drop zero-valued targets until they are no more numerous than the rest.

    Every non-zero pair is kept.  When every target is zero a single pair is
    kept so the regression set is never empty.  Returns ``(obs, targets,
    kept_indices)`` with indices in ascending order.
    """
    targets = np.asarray(targets, dtype=float)
    if len(targets) == 0:
        return obs[:0], targets[:0], np.zeros(0, dtype=int)
    zero = np.flatnonzero(targets == 0.0)
    nonzero = np.flatnonzero(targets != 0.0)
    n_keep = max(min(len(zero), len(nonzero)), 1 if len(nonzero) == 0 else 0)
    kept_zero = rng.choice(zero, size=n_keep, replace=False) if n_keep else zero[:0]
    idx = np.sort(np.concatenate([nonzero, kept_zero]))
    return obs[idx], targets[idx], idx
