"""On-policy training loop shared by SCPO and the trust-region baselines.

Every algorithm runs the same pipeline each epoch: collect augmented
rollouts, fit value networks, estimate advantages, then take one
trust-region step.  They differ only in which constraint gradient ``b``,
slack ``c`` and advantage mix feed that step:

* ``scpo``: cost-increment advantages, ``c = J_D + eps-term - w``.
* ``trpo``: no constraint.
* ``trpo_lagrangian``: no constraint; reward advantage penalized by a
  multiplier that ascends on the discounted episode cost.
* ``cpo``: discounted cost advantages, ``c = J_C - d``.
"""

from __future__ import annotations

import csv
import ctypes
import ctypes.util
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from scpo_lab import advantage as adv
from scpo_lab.config import RunConfig
from scpo_lab.envs import ACTION_DIM, PointNavEnv
from scpo_lab.errors import SolverError
from scpo_lab.mmdp import AugmentedState, augment_step
from scpo_lab.neural import GaussianPolicy, ValueFunction, adam_fit, policy_snapshot, value_snapshot
from scpo_lab.trust_region import (
    RECOVERY,
    Evaluation,
    TrustRegionProblem,
    line_search,
    solve_step,
)

log = logging.getLogger(__name__)

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator(threshold: int = 256 * 2**20) -> bool:
    """Keep batch-sized numpy temporaries on the heap instead of fresh mmaps.

    With glibc's default threshold every (N, 64) temporary is mmapped and
    unmapped, and page faults dominate runtime.  No-op off glibc.
    """
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, threshold) and libc.mallopt(_M_TRIM_THRESHOLD, 2 * threshold)
    except (OSError, AttributeError):
        return False
    return bool(ok)


METRIC_COLUMNS = [
    "epoch", "J_r", "M_c", "rho_c", "max_statewise_cost", "J_D_true", "J_D_surrogate",
    "J_C", "episodes", "mode", "case", "accepted", "backtracks", "kl", "c", "cost_change_bound",
    "predicted_cost_change", "realized_cost_change", "penalty", "v_loss", "cost_v_loss",
    "cost_targets_kept", "cost_targets_total",
]


@dataclass
class Batch:
    """One epoch of experience, flattened across episodes in collection order."""

    obs: np.ndarray  # augmented observations, (N, obs_dim + m)
    act: np.ndarray
    logp: np.ndarray
    rew: np.ndarray
    cost: np.ndarray  # (N, m)
    inc: np.ndarray  # (N, m)
    done: np.ndarray
    starts: list
    complete: list  # per segment: ended by the step limit (True) or by the batch boundary
    last_obs: np.ndarray  # per segment: augmented observation after its final step

    def __len__(self):
        return len(self.rew)

    def segment_bounds(self):
        return list(adv.segments(len(self), self.starts))

    def episode_stats(self, gamma: float) -> dict:
        rows = []
        for (s, e), full in zip(self.segment_bounds(), self.complete):
            disc = gamma ** np.arange(e - s)
            rows.append(
                dict(
                    complete=full,
                    ret=float(np.sum(self.rew[s:e])),
                    cost=float(np.sum(self.cost[s:e, 0])),
                    max_cost=float(np.max(self.cost[s:e, 0])),
                    sum_d=float(np.sum(self.inc[s:e, 0])),
                    disc_cost=float(disc @ self.cost[s:e, 0]),
                    length=e - s,
                )
            )
        done_rows = [r for r in rows if r["complete"]] or rows
        return {
            "episodes": len([r for r in rows if r["complete"]]),
            "J_r": float(np.mean([r["ret"] for r in done_rows])),
            "M_c": float(np.mean([r["cost"] for r in done_rows])),
            "max_statewise_cost": float(np.mean([r["max_cost"] for r in done_rows])),
            "J_D_true": float(np.mean([r["sum_d"] for r in done_rows])),
            "J_C": float(np.mean([r["disc_cost"] for r in done_rows])),
            "mean_length": float(np.mean([r["length"] for r in rows])),
        }


def collect_rollouts(policy: GaussianPolicy, envs, steps_per_epoch: int, env_rng, act_rng) -> Batch:
    """Run the policy for exactly ``steps_per_epoch`` steps split over ``envs``.

    Each environment starts a fresh episode; per-environment data is
    concatenated in environment-index order.
    """
    m = envs[0].config.n_constraints
    n = len(envs)
    shares = [steps_per_epoch // n + (1 if i < steps_per_epoch % n else 0) for i in range(n)]
    obs, act, logp, rew, cost, inc, done = [], [], [], [], [], [], []
    starts, complete, last_obs = [], [], []
    for env, share in zip(envs, shares):
        aug = AugmentedState.initial(env.reset(int(env_rng.integers(2**31))), m)
        starts.append(len(rew))
        for t in range(share):
            x = aug.vector()
            a, lp = policy.sample(x, act_rng)
            raw_next, r, c, d = env.step(a)
            nxt, dinc = augment_step(aug, raw_next, c)
            obs.append(x)
            act.append(a)
            logp.append(lp)
            rew.append(r)
            cost.append(c)
            inc.append(dinc)
            done.append(d)
            if d:
                complete.append(True)
                last_obs.append(nxt.vector())
                if t + 1 < share:
                    starts.append(len(rew))
                    aug = AugmentedState.initial(env.reset(int(env_rng.integers(2**31))), m)
            else:
                aug = nxt
        if not done[-1]:
            complete.append(False)
            last_obs.append(aug.vector())
    return Batch(
        obs=np.array(obs), act=np.array(act), logp=np.array(logp), rew=np.array(rew),
        cost=np.array(cost), inc=np.array(inc), done=np.array(done, dtype=bool),
        starts=starts, complete=complete, last_obs=np.array(last_obs),
    )


def compute_slack_c(j_d: float, w: float, epsilon_term: bool, delta: float, horizon: int, cost_adv=None) -> float:
    """Constraint slack ``J_D + 2 (H + 1) eps sqrt(delta / 2) - w``.

    ``eps`` is the batch maximum of ``|cost_adv|`` when the term is enabled.
    """
    eps = float(np.max(np.abs(cost_adv))) if (epsilon_term and cost_adv is not None and len(cost_adv)) else 0.0
    return j_d + 2.0 * (horizon + 1) * eps * math.sqrt(delta / 2.0) - w


def cmdp_threshold(w: float, gamma: float, horizon: int) -> float:
    """Discounted-sum budget matching a per-step bound ``w`` over ``horizon + 1`` steps."""
    return w * (1.0 - gamma ** (horizon + 1)) / (1.0 - gamma)


@dataclass
class UpdateInfo:
    mode: str = "none"
    case: int = -1
    accepted: int = 0
    backtracks: int = -1
    kl: float = 0.0
    c: float = float("nan")
    cost_change_bound: float = float("nan")
    predicted_cost_change: float = float("nan")
    realized_cost_change: float = float("nan")
    penalty: float = 0.0
    direction: np.ndarray | None = field(default=None, repr=False)
    surrogate_next: float = float("nan")


@dataclass
class MetricsRow:
    epoch: int
    J_r: float
    M_c: float
    rho_c: float
    max_statewise_cost: float
    J_D_true: float
    J_D_surrogate: float
    J_C: float
    episodes: int
    mode: str
    case: int
    accepted: int
    backtracks: int
    kl: float
    c: float
    cost_change_bound: float
    predicted_cost_change: float
    realized_cost_change: float
    penalty: float
    v_loss: float
    cost_v_loss: float
    cost_targets_kept: int
    cost_targets_total: int

    def csv_row(self) -> list:
        out = []
        for name in METRIC_COLUMNS:
            v = getattr(self, name)
            out.append(repr(float(v)) if isinstance(v, float) else v)
        return out


class Trainer:
    """Holds networks and RNG streams for one seeded run."""

    def __init__(self, config: RunConfig):
        self.config = cfg = config
        self.env_config = cfg.env_config()
        self.envs = [PointNavEnv(self.env_config) for _ in range(cfg.n_envs)]
        m = self.env_config.n_constraints
        in_dim = self.env_config.obs_dim + m
        # independent streams so every algorithm draws identical initial networks
        streams = np.random.SeedSequence(cfg.seed).spawn(6)
        rngs = [np.random.default_rng(s) for s in streams]
        self.policy = GaussianPolicy(in_dim, ACTION_DIM, cfg.hidden_sizes, rngs[0], cfg.log_std_init)
        self.value = ValueFunction(in_dim, cfg.hidden_sizes, rngs[1])
        self.cost_value = None
        if cfg.algo != "trpo":
            # zero output layer: an all-zero target set leaves it exactly zero
            self.cost_value = ValueFunction(in_dim, cfg.hidden_sizes, rngs[2], out_scale=0.0)
        self.env_rng, self.act_rng, self.sub_rng = rngs[3], rngs[4], rngs[5]
        self.penalty = 0.0
        self.total_cost = 0.0
        self.total_steps = 0
        self.pending_surrogate = float("nan")
        self.epoch = 0

    @property
    def horizon(self) -> int:
        return self.env_config.max_episode_steps

    # -- pipeline pieces -----------------------------------------------------

    def collect(self) -> Batch:
        return collect_rollouts(self.policy, self.envs, self.config.steps_per_epoch, self.env_rng, self.act_rng)

    def _bootstrap(self, batch: Batch, values_fn) -> np.ndarray:
        """Value after each segment: 0 at a real episode end, the estimate at a cut."""
        boot = values_fn(batch.last_obs)
        return np.where(np.array(batch.complete), 0.0, boot)

    def _extend(self, batch: Batch, vals, boot) -> np.ndarray:
        parts = []
        for j, (s, e) in enumerate(batch.segment_bounds()):
            parts += [vals[s:e], [boot[j]]]
        return np.concatenate(parts)

    def fit_values(self, batch: Batch) -> dict:
        cfg = self.config
        out = {"v_loss": float("nan"), "cost_v_loss": float("nan"), "kept": 0, "total": 0}
        boot = self._bootstrap(batch, self.value)
        ret = adv.discounted_returns(batch.rew, cfg.gamma, batch.starts, boot)
        out["v_loss"] = adam_fit(self.value, batch.obs, ret, cfg.vf_iters, cfg.vf_lr)[-1] if cfg.vf_iters else float("nan")
        if self.cost_value is None:
            return out
        if cfg.algo == "scpo":
            targets = adv.d_return_targets(batch.inc[:, 0], batch.starts)
            if cfg.subsample:
                x, y, _ = adv.subsample_zero_targets(batch.obs, targets, self.sub_rng)
            else:
                x, y = batch.obs, targets
        else:
            boot_c = self._bootstrap(batch, self.cost_value)
            x = batch.obs
            y = adv.discounted_returns(batch.cost[:, 0], cfg.gamma, batch.starts, boot_c)
        out["kept"], out["total"] = len(y), len(batch)
        if cfg.vf_iters:
            out["cost_v_loss"] = adam_fit(self.cost_value, x, y, cfg.vf_iters, cfg.vf_lr)[-1]
        return out

    def advantages(self, batch: Batch) -> dict:
        cfg = self.config
        vals = self._extend(batch, self.value(batch.obs), self._bootstrap(batch, self.value))
        a_r = adv.gae(batch.rew, vals, cfg.gamma, cfg.lam, batch.starts)
        out = {"reward": adv.normalize(a_r), "reward_raw": a_r}
        if self.cost_value is not None:
            cvals = self._extend(batch, self.cost_value(batch.obs), self._bootstrap(batch, self.cost_value))
            if cfg.algo == "scpo":
                a_c = adv.gae(batch.inc[:, 0], cvals, 1.0, cfg.cost_lam, batch.starts)
            else:
                a_c = adv.gae(batch.cost[:, 0], cvals, cfg.gamma, cfg.lam, batch.starts)
            # centered but not rescaled: the constraint keeps its units
            out["cost"] = a_c - np.mean(a_c)
            out["cost_raw"] = a_c
        return out

    # -- policy update ---------------------------------------------------------

    def policy_update(self, batch: Batch, advs: dict, stats: dict) -> UpdateInfo:
        cfg = self.config
        algo = cfg.algo
        pol = self.policy
        n = len(batch)
        theta_k = pol.get_flat()
        old_mu = pol.mean(batch.obs)
        old_log_std = pol.log_std.copy()
        logp_old = pol.log_prob(batch.obs, batch.act)
        # the surrogate expectation runs over the undiscounted state distribution,
        # whose mass per episode is the episode length
        ep_len = stats["mean_length"]

        a_r = advs["reward"]
        if algo == "trpo_lagrangian":
            a_r = (a_r - self.penalty * advs["cost"]) / (1.0 + self.penalty)
        a_c = advs.get("cost") if algo in ("scpo", "cpo") else None

        g = pol.grad_weighted_log_prob(batch.obs, batch.act, a_r / n)
        b, c = None, None
        if algo == "scpo":
            b = ep_len * pol.grad_weighted_log_prob(batch.obs, batch.act, a_c / n)
            c = compute_slack_c(stats["J_D_true"], cfg.w, cfg.epsilon_term, cfg.delta, self.horizon, a_c)
        elif algo == "cpo":
            b = ep_len * pol.grad_weighted_log_prob(batch.obs, batch.act, a_c / n)
            c = stats["J_C"] - cmdp_threshold(cfg.w, cfg.gamma, self.horizon)

        info = UpdateInfo(c=float("nan") if c is None else c, penalty=self.penalty)

        hvp = pol.fisher_operator(batch.obs, cfg.damping)
        problem = TrustRegionProblem(g, b, 0.0 if c is None else c, cfg.delta, hvp, cfg.cg_iters, cfg.cg_tol)
        try:
            step = solve_step(problem)
        except SolverError as exc:
            log.warning("epoch %d: solver failed (%s) %s", self.epoch, exc, exc.diagnostics)
            info.mode = "error"
            return info
        info.mode, info.case, info.direction = step.mode, step.case, step.direction

        def evaluate(theta):
            ratio = np.exp(pol.log_prob(batch.obs, batch.act, theta) - logp_old)
            return Evaluation(
                kl=pol.kl_from(batch.obs, old_mu, old_log_std, theta),
                reward_surrogate=float(np.mean(ratio * a_r)),
                cost_surrogate=ep_len * float(np.mean(ratio * a_c)) if a_c is not None else 0.0,
            )

        base = evaluate(theta_k)
        res = line_search(
            theta_k, step.direction, evaluate, cfg.delta, cfg.backtrack_coef, cfg.backtrack_iters,
            c=c, infeasible=step.mode == RECOVERY,
        )
        pol.set_flat(res.theta)
        info.accepted = int(res.accepted)
        info.backtracks = -1 if res.backtracks is None else res.backtracks
        # re-measured on the batch after the parameters are applied
        info.kl = pol.kl_from(batch.obs, old_mu, old_log_std)
        after = evaluate(res.theta)
        if c is not None:
            info.cost_change_bound = max(-c, 0.0)
            scale = cfg.backtrack_coef ** res.backtracks if res.accepted else 0.0
            info.predicted_cost_change = scale * step.predicted_constraint_change
            info.realized_cost_change = after.cost_surrogate - base.cost_surrogate
        if algo == "scpo":
            eps = float(np.max(np.abs(a_c))) if len(a_c) else 0.0
            info.surrogate_next = (
                stats["J_D_true"] + after.cost_surrogate
                + 2.0 * (self.horizon + 1) * eps * math.sqrt(max(info.kl, 0.0) / 2.0)
            )
        if algo == "trpo_lagrangian":
            budget = cmdp_threshold(cfg.w, cfg.gamma, self.horizon)
            self.penalty = max(0.0, self.penalty + cfg.lagrangian_lr * (stats["J_C"] - budget))
        return info

    def train_epoch(self) -> MetricsRow:
        cfg = self.config
        batch = self.collect()
        stats = batch.episode_stats(cfg.gamma)
        self.total_cost += float(np.sum(batch.cost[:, 0]))
        self.total_steps += len(batch)
        fit = self.fit_values(batch)
        advs = self.advantages(batch)
        surrogate = self.pending_surrogate
        info = self.policy_update(batch, advs, stats)
        self.pending_surrogate = info.surrogate_next
        row = MetricsRow(
            epoch=self.epoch,
            J_r=stats["J_r"],
            M_c=stats["M_c"],
            rho_c=self.total_cost / self.total_steps,
            max_statewise_cost=stats["max_statewise_cost"],
            J_D_true=stats["J_D_true"],
            J_D_surrogate=surrogate,
            J_C=stats["J_C"],
            episodes=stats["episodes"],
            mode=info.mode,
            case=info.case,
            accepted=info.accepted,
            backtracks=info.backtracks,
            kl=info.kl,
            c=info.c,
            cost_change_bound=info.cost_change_bound,
            predicted_cost_change=info.predicted_cost_change,
            realized_cost_change=info.realized_cost_change,
            penalty=info.penalty,
            v_loss=fit["v_loss"],
            cost_v_loss=fit["cost_v_loss"],
            cost_targets_kept=fit["kept"],
            cost_targets_total=fit["total"],
        )
        self.epoch += 1
        return row

    def save_checkpoint(self, directory, tag: str) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        policy_snapshot(self.policy, directory / f"policy_{tag}.bin")
        value_snapshot(self.value, directory / f"value_{tag}.bin")
        if self.cost_value is not None:
            value_snapshot(self.cost_value, directory / f"cost_value_{tag}.bin", kind="cost_value")


@dataclass
class RunResult:
    rows: list
    trainer: Trainer
    out_dir: Path | None = None


def run(config: RunConfig, out_dir=None) -> RunResult:
    """Train for ``config.epochs`` epochs.

    With ``out_dir`` set, writes ``metrics.csv`` (flushed every epoch),
    ``summary.json`` and ``checkpoints/``.
    """
    tune_allocator()
    trainer = Trainer(config)
    rows = []
    fh = writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        trainer.save_checkpoint(out_dir / "checkpoints", "init")
        fh = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        fh.flush()
    try:
        for _ in range(config.epochs):
            row = trainer.train_epoch()
            rows.append(row)
            log.info(
                "epoch %3d  J_r %.3f  M_c %.4f  rho_c %.5f  mode %s  kl %.4f",
                row.epoch, row.J_r, row.M_c, row.rho_c, row.mode, row.kl,
            )
            if writer is not None:
                writer.writerow(row.csv_row())
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        if config.epochs:
            trainer.save_checkpoint(out_dir / "checkpoints", "final")
        summary = {
            "run_id": config.run_id(),
            "config": config.to_dict(),
            "epochs_completed": len(rows),
            "final": {k: v for k, v in asdict(rows[-1]).items()} if rows else None,
        }
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float))
    return RunResult(rows, trainer, out_dir)


def read_metrics(path) -> list[dict]:
    """Load a metrics CSV written by :func:`run` with numeric columns as floats."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            if k != "mode":
                r[k] = float(v)
    return rows
