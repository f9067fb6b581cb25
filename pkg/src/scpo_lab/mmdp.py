"""Maximum-MDP augmentation.

Every state carries a running maximum of each per-step cost seen so far in
the episode.  A transition raises that maximum by a non-negative increment,
so the increments of an episode sum to its largest per-step cost.  Policies
and value functions see the augmented vector ``[base, max_costs]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from scpo_lab.errors import DomainError


def cost_increment(cost: float, running_max: float) -> float:
    """Amount by which ``cost`` raises the running maximum (never negative)."""
    if not (math.isfinite(cost) and math.isfinite(running_max)):
        raise DomainError(f"non-finite input: cost={cost!r}, running_max={running_max!r}")
    return max(cost - running_max, 0.0)


@dataclass(frozen=True)
class AugmentedState:
    base: np.ndarray
    max_costs: np.ndarray

    @classmethod
    def initial(cls, base, n_constraints: int) -> "AugmentedState":
        return cls(np.asarray(base, dtype=float), np.zeros(n_constraints))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.base, self.max_costs])


def augment_step(prev: AugmentedState, raw_next_obs, costs) -> tuple[AugmentedState, np.ndarray]:
    costs = np.asarray(costs, dtype=float)
    if costs.shape != prev.max_costs.shape:
        raise DomainError(
            f"cost vector has shape {costs.shape}, running maxima have {prev.max_costs.shape}"
        )
    increments = np.array([cost_increment(c, m) for c, m in zip(costs, prev.max_costs)])
    # M + D rather than max(M, C): keeps M exactly equal to the running sum of D.
    nxt = AugmentedState(np.asarray(raw_next_obs, dtype=float), prev.max_costs + increments)
    return nxt, increments


def augment_costs(costs) -> tuple[np.ndarray, np.ndarray]:
    """Replay augmentation over a raw cost sequence.

    ``costs`` has shape (T,) or (T, m).  Returns ``(max_costs, increments)``
    where ``max_costs[t]`` is the tag *before* step t (zero at t = 0).
    """
    costs = np.asarray(costs, dtype=float)
    squeeze = costs.ndim == 1
    costs = costs.reshape(len(costs), -1)
    if not np.all(np.isfinite(costs)):
        raise DomainError("cost sequence contains non-finite values")
    tags = np.zeros_like(costs)
    incs = np.zeros_like(costs)
    # same recurrence as augment_step, in plain floats per constraint
    for i in range(costs.shape[1]):
        m = 0.0
        col_tags, col_incs = [], []
        for c in costs[:, i].tolist():
            d = max(c - m, 0.0)
            col_tags.append(m)
            col_incs.append(d)
            m = m + d
        tags[:, i] = col_tags
        incs[:, i] = col_incs
    if squeeze:
        return tags[:, 0], incs[:, 0]
    return tags, incs


@dataclass
class Transition:
    state: AugmentedState
    action: np.ndarray
    next_state: AugmentedState
    reward: float
    costs: np.ndarray
    increments: np.ndarray
    log_prob: float
    done: bool


COLUMNS_DOC = (
    "t, obs_0..obs_{n-1}, M_0..M_{m-1}, act_0..act_{k-1}, reward, "
    "cost_0..cost_{m-1}, inc_0..inc_{m-1}, log_prob, done"
)


@dataclass
class EpisodeBuffer:
    transitions: list[Transition] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return len(self.transitions)

    def append(self, tr: Transition) -> None:
        self.transitions.append(tr)

    def costs(self) -> np.ndarray:
        return np.array([tr.costs for tr in self.transitions])

    def increments(self) -> np.ndarray:
        return np.array([tr.increments for tr in self.transitions])

    def header(self) -> list[str]:
        tr = self.transitions[0]
        n, m, k = len(tr.state.base), len(tr.costs), len(tr.action)
        return (
            ["t"]
            + [f"obs_{i}" for i in range(n)]
            + [f"M_{i}" for i in range(m)]
            + [f"act_{i}" for i in range(k)]
            + ["reward"]
            + [f"cost_{i}" for i in range(m)]
            + [f"inc_{i}" for i in range(m)]
            + ["log_prob", "done"]
        )

    def rows(self) -> Iterable[list]:
        for t, tr in enumerate(self.transitions):
            yield (
                [t]
                + [repr(float(x)) for x in tr.state.base]
                + [repr(float(x)) for x in tr.state.max_costs]
                + [repr(float(x)) for x in tr.action]
                + [repr(float(tr.reward))]
                + [repr(float(x)) for x in tr.costs]
                + [repr(float(x)) for x in tr.increments]
                + [repr(float(tr.log_prob)), int(tr.done)]
            )

    def to_csv(self, path) -> None:
        """Write one row per transition; column order is ``COLUMNS_DOC``."""
        if not self.transitions:
            raise DomainError("cannot serialize an empty episode")
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header())
            writer.writerows(self.rows())


def episode_max_identity(buffer: EpisodeBuffer, i: int) -> tuple[float, float]:
    """Both sides of ``sum_t D_i,t == max_t C_i,t`` for one episode."""
    if not buffer.transitions:
        raise DomainError("episode buffer is empty")
    incs = buffer.increments()[:, i]
    costs = buffer.costs()[:, i]
    return float(np.sum(incs)), float(np.max(costs))


def sequence_max_identity(costs: Sequence[float]) -> tuple[float, float]:
    """Same identity straight from a raw (non-negative) cost sequence."""
    if len(costs) == 0:
        raise DomainError("cost sequence is empty")
    _, incs = augment_costs(costs)
    return float(np.sum(incs)), float(np.max(costs))
