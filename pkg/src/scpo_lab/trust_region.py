"""Constrained natural-gradient step with a single linearized constraint.

Solves

    maximize    g^T x
    subject to  0.5 x^T H x <= delta
                c + b^T x   <= 0

through its one-dimensional dual, using only products with H (conjugate
gradient), and then backtracks along the proposed direction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from scpo_lab.errors import DomainError, SolverError

log = logging.getLogger(__name__)

FEASIBLE = "feasible"
RECOVERY = "infeasible-recovery"


@dataclass
class TrustRegionProblem:
    g: np.ndarray
    b: np.ndarray | None
    c: float
    delta: float
    hvp: Callable[[np.ndarray], np.ndarray]
    cg_iters: int = 20
    cg_tol: float = 1e-8

    def __post_init__(self):
        if not self.delta > 0:
            raise DomainError(f"trust-region radius must be > 0, got {self.delta}")


@dataclass
class StepResult:
    direction: np.ndarray
    mode: str
    lam: float | None = None
    nu: float | None = None
    predicted_kl: float = 0.0
    predicted_constraint_change: float = 0.0
    case: int = 4  # 0 recovery, 1 infeasible start, 2 feasible start, 3 constraint slack, 4 unconstrained
    q: float = 0.0
    r: float = 0.0
    s: float = 0.0


@dataclass
class CGInfo:
    iterations: int
    residual: float
    converged: bool


def conjugate_gradient(hvp, rhs, max_iters: int = 20, residual_tol: float = 1e-8, info: list | None = None):
    """Solve ``H x = rhs`` for symmetric positive-definite ``H``.

    Stops once ``||H x - rhs|| / ||rhs|| <= residual_tol``.  Pass a list as
    ``info`` to receive a :class:`CGInfo` describing the run.
    """
    rhs = np.asarray(rhs, dtype=float)
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rr = float(r @ r)
    rhs_norm = math.sqrt(rr)
    if rhs_norm == 0.0:
        if info is not None:
            info.append(CGInfo(0, 0.0, True))
        return x
    it = 0
    while it < max_iters and math.sqrt(rr) / rhs_norm > residual_tol:
        hp = hvp(p)
        php = float(p @ hp)
        if not php > 0.0:
            raise SolverError(
                "curvature along search direction is not positive",
                iteration=it,
                pHp=php,
                residual=math.sqrt(rr) / rhs_norm,
            )
        alpha = rr / php
        x += alpha * p
        r -= alpha * hp
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
    rel = math.sqrt(rr) / rhs_norm
    if rel > residual_tol:
        log.debug("CG stopped after %d iterations, relative residual %.3g", it, rel)
    if info is not None:
        info.append(CGInfo(it, rel, rel <= residual_tol))
    return x


def solve_step(problem: TrustRegionProblem) -> StepResult:
    """Closed-form dual solution of the single-constraint trust-region program."""
    g, b, c, delta = problem.g, problem.b, float(problem.c), problem.delta

    def solve(v):
        return conjugate_gradient(problem.hvp, v, problem.cg_iters, problem.cg_tol)

    v_g = solve(g)
    q = float(g @ v_g)

    if b is None or not np.any(b):
        # no usable constraint gradient: plain natural-gradient step
        if q <= 0.0:
            return StepResult(np.zeros_like(g), FEASIBLE, lam=None, nu=0.0, case=4, q=q)
        lam = math.sqrt(q / (2.0 * delta))
        x = v_g / lam
        return StepResult(x, FEASIBLE, lam=lam, nu=0.0, predicted_kl=0.5 * q / lam**2, case=4, q=q)

    v_b = solve(b)
    r = float(g @ v_b)
    s = float(b @ v_b)
    if not s > 0.0:
        raise SolverError("constraint gradient has non-positive H^-1 norm", s=s, r=r, q=q)

    B = 2.0 * delta - c * c / s
    if c > 0.0 and B < 0.0:
        # no point of the trust region satisfies the linearized constraint
        nu = math.sqrt(2.0 * delta / s)
        x = -nu * v_b
        return StepResult(
            x, RECOVERY, lam=0.0, nu=nu, predicted_kl=0.5 * nu * nu * s,
            predicted_constraint_change=float(b @ x), case=0, q=q, r=r, s=s,
        )
    if c < 0.0:
        case = 3 if B < 0.0 else 2
    else:
        case = 1

    lam = _dual_lambda(q, r, s, c, delta) if q > 0.0 else 0.0
    if lam > 0.0:
        nu = max(0.0, lam * c + r) / s
        x = (v_g - nu * v_b) / lam
    else:
        # flat objective: take the smallest step that satisfies the constraint
        nu = 0.0
        x = -(c / s) * v_b if c > 0.0 else np.zeros_like(g)
    kl = 0.5 * float(x @ problem.hvp(x))
    return StepResult(
        x, FEASIBLE, lam=lam, nu=nu, predicted_kl=kl,
        predicted_constraint_change=float(b @ x), case=case, q=q, r=r, s=s,
    )


def _dual_lambda(q, r, s, c, delta):
    """Minimize the dual over the trust-region multiplier.

    With ``nu(lam) = max(0, lam c + r) / s`` eliminated, the dual is
    ``(q - 2 nu r + nu^2 s) / (2 lam) + lam delta - nu c``.  It is smooth on
    two intervals: where nu > 0 it equals ``(A/lam + B lam)/2 - r c/s`` and
    where nu = 0 it equals ``q/(2 lam) + lam delta``.  Each piece has a
    closed-form minimizer; clip it to its interval and keep the better one.
    """
    A = max(q - r * r / s, 0.0)
    B = 2.0 * delta - c * c / s

    def dual(lam):
        nu = max(0.0, lam * c + r) / s
        return (q - 2.0 * nu * r + nu * nu * s) / (2.0 * lam) + lam * delta - nu * c

    if c > 0.0:
        split = max(-r / c, 0.0)
        active, free = (split, math.inf), (0.0, split)
    elif c < 0.0:
        split = max(-r / c, 0.0)
        active, free = (0.0, split), (split, math.inf)
    else:
        active, free = ((0.0, math.inf), None) if r > 0.0 else (None, (0.0, math.inf))

    candidates = []
    if active is not None and active[1] > active[0]:
        lo, hi = active
        if B > 0.0:
            lam = math.sqrt(A / B) if A > 0.0 else lo
        else:
            lam = hi
        lam = min(max(lam, lo), hi)
        if 0.0 < lam < math.inf:
            candidates.append(lam)
    if free is not None and free[1] > free[0]:
        lo, hi = free
        lam = min(max(math.sqrt(q / (2.0 * delta)), lo), hi)
        if 0.0 < lam < math.inf:
            candidates.append(lam)
    if not candidates:
        raise SolverError("dual has no finite minimizer", q=q, r=r, s=s, c=c, delta=delta)
    return min(candidates, key=dual)


@dataclass
class Evaluation:
    kl: float
    reward_surrogate: float
    cost_surrogate: float


@dataclass
class LineSearchResult:
    theta: np.ndarray
    accepted: bool
    backtracks: int | None
    evaluation: Evaluation | None
    rejections: list = field(default_factory=list)


def line_search(
    theta_k,
    direction,
    evaluate: Callable[[np.ndarray], Evaluation],
    delta: float,
    xi: float = 0.8,
    max_backtracks: int = 100,
    c: float | None = None,
    infeasible: bool = False,
) -> LineSearchResult:
    """Backtrack along ``direction`` until the candidate passes every gate.

    Gates: sampled KL within ``delta``; cost surrogate increase at most
    ``max(-c, 0)`` (skipped when ``c`` is None); reward surrogate not below
    the current one unless the step came from the recovery branch.
    """
    if not 0.0 < xi < 1.0:
        raise DomainError(f"backtracking coefficient must lie in (0, 1), got {xi}")
    base = evaluate(theta_k)
    rejections = []
    for j in range(max_backtracks):
        cand = theta_k + xi**j * direction
        ev = evaluate(cand)
        vals = (ev.kl, ev.reward_surrogate, ev.cost_surrogate)
        if not all(math.isfinite(x) for x in vals):
            rejections.append((j, "non-finite"))
            continue
        if ev.kl > delta:
            rejections.append((j, "kl"))
            continue
        if c is not None and ev.cost_surrogate - base.cost_surrogate > max(-c, 0.0):
            rejections.append((j, "cost"))
            continue
        if not infeasible and ev.reward_surrogate < base.reward_surrogate:
            rejections.append((j, "reward"))
            continue
        return LineSearchResult(cand, True, j, ev, rejections)
    log.info("line search exhausted %d backtracks; keeping current parameters", max_backtracks)
    return LineSearchResult(np.array(theta_k, dtype=float), False, None, None, rejections)
