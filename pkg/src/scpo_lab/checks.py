"""Property suites behind ``scpo-lab check``.

Each suite compares a production routine against an independent oracle
(central finite differences, dense linear algebra, brute-force search) on
seeded random cases and returns a :class:`SuiteResult`.  The suites call
through the public classes, so a patched method is what gets checked.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from scpo_lab import mmdp
from scpo_lab.neural import GaussianPolicy, ValueFunction
from scpo_lab.trust_region import RECOVERY, TrustRegionProblem, conjugate_gradient, solve_step

MAX_REPORTED_FAILURES = 5


@dataclass
class SuiteResult:
    name: str
    cases: int = 0
    failed: int = 0
    worst: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> int:
        return self.cases - self.failed

    @property
    def ok(self) -> bool:
        return self.failed == 0 and self.cases > 0

    def record(self, value: float, limit: float, **case) -> bool:
        """Log one case whose error ``value`` must not exceed ``limit``."""
        self.cases += 1
        good = math.isfinite(value) and value <= limit
        self.worst = max(self.worst, value) if math.isfinite(value) else math.inf
        if not good:
            self.failed += 1
            if len(self.failures) < MAX_REPORTED_FAILURES:
                self.failures.append({"error": _num(value), "limit": limit, **{k: _num(v) for k, v in case.items()}})
        return good

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(passed=self.passed, ok=self.ok, worst=_num(self.worst))
        return d


def _num(v):
    if isinstance(v, np.ndarray):
        return [_num(x) for x in v.tolist()]
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def central_difference(f, x, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return out


def _small_policy(rng, obs_dim=4, hidden=(8, 8), act_dim=2):
    pol = GaussianPolicy(obs_dim, act_dim, hidden, rng, log_std_init=-0.5)
    # move away from the tiny output initialization so every term matters
    pol.set_flat(pol.get_flat() + 0.3 * rng.standard_normal(pol.n_params))
    return pol


# -- suites -------------------------------------------------------------------


def check_mmdp_identity(n_episodes: int = 1000, max_len: int = 200, tol: float = 1e-9, seed: int = 0) -> SuiteResult:
    """Sum of cost increments equals the running maximum, episode by episode."""
    res = SuiteResult("mmdp_identity")
    rng = np.random.default_rng(seed)
    for i in range(n_episodes):
        n = int(rng.integers(1, max_len + 1))
        kind = i % 3
        if kind == 0:
            costs = rng.uniform(0.0, 1.0, n)
        elif kind == 1:
            costs = rng.choice([0.0, 1.0], n, p=[0.9, 0.1])
        else:
            costs = np.maximum(0.0, rng.normal(0.0, 0.1, n))
        _, incs = mmdp.augment_costs(costs[:, None])
        res.record(abs(float(np.sum(incs)) - float(np.max(costs))), tol, episode=i, length=n)
    return res


def check_grad_log_prob(points: int = 20, tol: float = 1e-4, seed: int = 1) -> SuiteResult:
    res = SuiteResult("grad_log_prob")
    rng = np.random.default_rng(seed)
    for i in range(points):
        pol = _small_policy(rng)
        obs = rng.standard_normal(4)
        act = rng.standard_normal(2)
        base = pol.get_flat()
        analytic = pol.grad_log_prob(obs, act)
        numeric = central_difference(lambda th: float(pol.log_prob(obs, act, th)), base)
        pol.set_flat(base)
        res.record(relative_error(analytic, numeric), tol, point=i)
    return res


def check_value_grad(points: int = 20, tol: float = 1e-4, seed: int = 2) -> SuiteResult:
    res = SuiteResult("value_mse_grad")
    rng = np.random.default_rng(seed)
    for i in range(points):
        vf = ValueFunction(4, (8, 8), rng)
        obs = rng.standard_normal((16, 4))
        targets = rng.standard_normal(16)
        _, analytic = vf.mse_grad(obs, targets)
        numeric = central_difference(lambda th: vf.mse(obs, targets, th), vf.net.get_flat())
        res.record(relative_error(analytic, numeric), tol, point=i)
    return res


def check_kl_grad(points: int = 20, tol: float = 1e-4, seed: int = 3) -> SuiteResult:
    res = SuiteResult("kl_grad")
    rng = np.random.default_rng(seed)
    for i in range(points):
        pol = _small_policy(rng)
        obs = rng.standard_normal((16, 4))
        old_mu = pol.mean(obs) + 0.2 * rng.standard_normal((16, 2))
        old_log_std = pol.log_std + 0.2 * rng.standard_normal(2)
        analytic = pol.grad_kl_from(obs, old_mu, old_log_std)
        numeric = central_difference(lambda th: pol.kl_from(obs, old_mu, old_log_std, th), pol.get_flat())
        res.record(relative_error(analytic, numeric), tol, point=i)
    return res


def dense_kl_hessian(pol: GaussianPolicy, obs, h: float = 1e-5) -> np.ndarray:
    """KL Hessian at coincident parameters by differencing the KL gradient."""
    base = pol.get_flat()
    old_mu, old_log_std = pol.mean(obs), pol.log_std.copy()
    n = len(base)
    hess = np.empty((n, n))
    for i in range(n):
        cols = []
        for sign in (1.0, -1.0):
            th = base.copy()
            th[i] += sign * h
            pol.set_flat(th)
            cols.append(pol.grad_kl_from(obs, old_mu, old_log_std))
        hess[:, i] = (cols[0] - cols[1]) / (2.0 * h)
    pol.set_flat(base)
    return 0.5 * (hess + hess.T)


def check_fvp(points: int = 10, tol: float = 1e-5, sym_tol: float = 1e-8, seed: int = 4) -> SuiteResult:
    """Fisher-vector products on a policy with at most 50 parameters."""
    res = SuiteResult("fvp")
    rng = np.random.default_rng(seed)
    for i in range(points):
        pol = _small_policy(rng, obs_dim=3, hidden=(4,), act_dim=2)
        assert pol.n_params <= 50
        obs = rng.standard_normal((12, 3))
        dense = dense_kl_hessian(pol, obs)
        u, v = rng.standard_normal((2, pol.n_params))
        hv = pol.fisher_vector_product(obs, v)
        res.record(float(np.max(np.abs(hv - dense @ v))), tol, point=i, check="dense")
        hu = pol.fisher_vector_product(obs, u)
        uhv, vhu = float(u @ hv), float(v @ hu)
        res.record(abs(uhv - vhu) / max(abs(uhv), abs(vhu), 1e-12), sym_tol, point=i, check="symmetry")
    return res


def random_spd(rng, dim: int, cond: float = 100.0) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eig = np.exp(rng.uniform(0.0, math.log(cond), dim))
    return (q * eig) @ q.T


def check_cg(systems: int = 20, tol: float = 1e-6, seed: int = 5) -> SuiteResult:
    res = SuiteResult("conjugate_gradient")
    rng = np.random.default_rng(seed)
    for i in range(systems):
        dim = int(rng.integers(2, 201))
        a = random_spd(rng, dim)
        rhs = rng.standard_normal(dim)
        x = conjugate_gradient(lambda p: a @ p, rhs, max_iters=10 * dim, residual_tol=1e-12)
        ref = np.linalg.solve(a, rhs)
        res.record(relative_error(x, ref), tol, system=i, dim=dim)
    a = random_spd(rng, 10)
    x = conjugate_gradient(lambda p: a @ p, np.zeros(10))
    res.record(float(np.max(np.abs(x))), 0.0, system="zero-rhs")
    return res


def grid_oracle(q, r, s, c, delta, n: int = 200_001):
    """Brute-force the program restricted to ``span(H^-1 g, H^-1 b)``.

    In that span ``x = a H^-1 g + e H^-1 b`` the program is two dimensional:
    objective ``a q + e r``, constraint ``c + a r + e s``, quadratic form
    ``[a e] G [a e]^T`` with ``G = [[q, r], [r, s]]``.  A linear objective
    over (ellipse cap) attains its optimum on the boundary, so we sample the
    ellipse and the chord the half-plane cuts from it.  Returns
    ``(objective, feasible)``; when nothing is feasible, returns the smallest
    attainable constraint value instead.
    """
    G = np.array([[q, r], [r, s]])
    L = np.linalg.cholesky(G)
    to_coef = np.linalg.inv(L.T)  # y -> (a, e) with 0.5 |y|^2 = 0.5 [a e] G [a e]^T
    rad = math.sqrt(2.0 * delta)
    phi = np.linspace(0.0, 2.0 * np.pi, n)
    ring = rad * np.stack([np.cos(phi), np.sin(phi)])
    pts = [ring]
    # chord: c + w . y = 0 with w = to_coef^T (r, s)
    w = to_coef.T @ np.array([r, s])
    wn = float(np.linalg.norm(w))
    foot = -c * w / (wn * wn)
    if np.linalg.norm(foot) <= rad:
        half = math.sqrt(max(rad * rad - float(foot @ foot), 0.0))
        t = np.linspace(-half, half, n)
        perp = np.array([-w[1], w[0]]) / wn
        pts.append(foot[:, None] + perp[:, None] * t)
    y = np.concatenate(pts, axis=1)
    coef = to_coef @ y
    obj = q * coef[0] + r * coef[1]
    con = c + r * coef[0] + s * coef[1]
    feasible = con <= 1e-9 * max(1.0, abs(c))
    if np.any(feasible):
        return float(np.max(obj[feasible])), True
    return float(np.min(con)), False


def check_dual(instances: int = 50, tol: float = 1e-3, seed: int = 6) -> SuiteResult:
    res = SuiteResult("dual_oracle")
    rng = np.random.default_rng(seed)
    for i in range(instances):
        dim = int(rng.integers(2, 12))
        diag = np.exp(rng.uniform(-1.0, 1.0, dim))
        g = rng.standard_normal(dim)
        b = rng.standard_normal(dim)
        delta = float(rng.uniform(0.005, 0.05))
        # spread c over feasible, tight and unrecoverable regimes
        c = float(rng.normal(0.0, 0.5) * math.sqrt(2.0 * delta * float(b @ (b / diag))))
        prob = TrustRegionProblem(g, b, c, delta, lambda v: diag * v, cg_iters=50, cg_tol=1e-13)
        step = solve_step(prob)
        q, r, s = float(g @ (g / diag)), float(g @ (b / diag)), float(b @ (b / diag))
        best, feasible = grid_oracle(q, r, s, c, delta)
        x = step.direction
        if feasible:
            got = float(g @ x)
            res.record(abs(got - best) / max(abs(best), 1e-12), tol, instance=i, case=step.case, mode=step.mode)
        else:
            got = c + float(b @ x)
            res.record(
                abs(got - best) / max(abs(best), 1e-12) + (0.0 if step.mode == RECOVERY else math.inf),
                tol, instance=i, mode=step.mode,
            )
    # no constraint gradient: the plain natural-gradient step
    for i in range(10):
        dim = int(rng.integers(2, 12))
        diag = np.exp(rng.uniform(-1.0, 1.0, dim))
        g = rng.standard_normal(dim)
        delta = float(rng.uniform(0.005, 0.05))
        step = solve_step(TrustRegionProblem(g, np.zeros(dim), 0.0, delta, lambda v: diag * v, 50, 1e-13))
        q = float(g @ (g / diag))
        ref = math.sqrt(2.0 * delta / q) * g / diag
        res.record(relative_error(step.direction, ref), 1e-8, instance=f"b=0:{i}")
    return res


SUITES = {
    "mmdp_identity": check_mmdp_identity,
    "grad_log_prob": check_grad_log_prob,
    "value_mse_grad": check_value_grad,
    "kl_grad": check_kl_grad,
    "fvp": check_fvp,
    "conjugate_gradient": check_cg,
    "dual_oracle": check_dual,
}


def run_all(names=None) -> dict:
    """Run the selected suites; an exception inside a suite counts as a failure."""
    report = {"ok": True, "suites": []}
    for name in names or SUITES:
        try:
            result = SUITES[name]()
        except Exception as exc:  # noqa: BLE001 - reported, not swallowed
            result = SuiteResult(name, cases=1, failed=1, worst=math.inf)
            result.failures.append({"exception": f"{type(exc).__name__}: {exc}"})
        report["suites"].append(result.to_dict())
        report["ok"] = report["ok"] and result.ok
    report["failing"] = [s["name"] for s in report["suites"] if not s["ok"]]
    return report
