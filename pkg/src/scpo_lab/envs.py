"""Deterministic 2D point-mass goal navigation with hazards and pillars.

The agent is velocity controlled: an action in [-1, 1]^2 is scaled by
``max_speed`` and integrated for ``dt``.  Reaching the goal pays a +1 bonus
and moves the goal elsewhere; the episode only ends at the step limit.

Hazards are trespassable circles with cost ``max(0, R_h - d_h)``.  Pillars
block motion and cost 1 per step in which the agent pushes into one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from scpo_lab.errors import ConfigError, DomainError

K_NEAREST = 4
SENTINEL = 10.0
ACTION_DIM = 2


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class EnvConfig:
    hazards: tuple[Obstacle, ...] = ()
    pillars: tuple[Obstacle, ...] = ()
    goal_radius: float = 0.3
    world_half_extent: float = 2.0
    max_episode_steps: int = 200
    dt: float = 0.05
    max_speed: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.max_episode_steps < 1:
            raise ConfigError("max_episode_steps must be >= 1")
        for name in ("goal_radius", "world_half_extent", "dt", "max_speed"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        ext = self.world_half_extent
        for kind, obs in (("hazard", self.hazards), ("pillar", self.pillars)):
            for o in obs:
                if not o.radius > 0:
                    raise ConfigError(f"{kind} radius must be > 0, got {o.radius}")
                if max(abs(o.center[0]), abs(o.center[1])) > ext:
                    raise ConfigError(f"{kind} at {o.center} lies outside the world")

    @property
    def n_constraints(self) -> int:
        return 1

    @property
    def obs_dim(self) -> int:
        return 3 + 2 * 3 * K_NEAREST + 2


@dataclass
class EnvState:
    position: np.ndarray
    velocity: np.ndarray
    goal: np.ndarray
    steps_elapsed: int
    prev_goal_distance: float
    done: bool = False
    rng: np.random.Generator = field(default=None, repr=False, compare=False)


# -- reward and cost primitives ---------------------------------------------


def goal_reward(d_prev: float, d_now: float, goal_radius: float) -> float:
    if not (math.isfinite(d_prev) and math.isfinite(d_now)):
        raise DomainError("goal distances must be finite")
    r = d_prev - d_now
    if d_now < goal_radius:
        r += 1.0
    return r


def hazard_cost(d_h: float, R_h: float) -> float:
    return max(0.0, R_h - d_h)


def inside_any(position, obstacles) -> bool:
    px, py = float(position[0]), float(position[1])
    for o in obstacles:
        if math.hypot(px - o.center[0], py - o.center[1]) < o.radius:
            return True
    return False


def pillar_cost(state_or_position, pillars) -> float:
    """1.0 if the position lies strictly inside a pillar, else 0.0."""
    pos = getattr(state_or_position, "position", state_or_position)
    return 1.0 if inside_any(pos, pillars) else 0.0


def total_hazard_cost(position, hazards) -> float:
    """Cost of the most-penetrated hazard (the nearest, for equal radii)."""
    best = 0.0
    px, py = float(position[0]), float(position[1])
    for h in hazards:
        d = math.hypot(px - h.center[0], py - h.center[1])
        best = max(best, hazard_cost(d, h.radius))
    return best


# -- layouts ------------------------------------------------------------------


def _scatter(rng, n, radius, ext, taken, min_gap):
    placed = []
    for _ in range(n):
        for _attempt in range(10_000):
            c = rng.uniform(-ext + radius + 0.1, ext - radius - 0.1, size=2)
            if all(
                math.hypot(c[0] - o.center[0], c[1] - o.center[1]) >= o.radius + radius + min_gap
                for o in taken + placed
            ):
                placed.append(Obstacle((float(c[0]), float(c[1])), radius))
                break
        else:
            raise ConfigError("could not place obstacles without overlap")
    return placed


PRESETS = {
    "point-hazard-1": ("hazard", 1),
    "point-hazard-4": ("hazard", 4),
    "point-hazard-8": ("hazard", 8),
    "point-pillar-1": ("pillar", 1),
    "point-pillar-4": ("pillar", 4),
    "point-pillar-8": ("pillar", 8),
    "point-free": ("none", 0),
}


def make_config(preset: str, layout_seed: int = 2023, **overrides) -> EnvConfig:
    """Build a named layout.  The layout is fixed by ``layout_seed``."""
    try:
        kind, n = PRESETS[preset]
    except KeyError:
        raise ConfigError(f"unknown env preset {preset!r}; known: {sorted(PRESETS)}") from None
    hazard_radius = overrides.pop("hazard_radius", 0.2)
    pillar_radius = overrides.pop("pillar_radius", 0.2)
    base = EnvConfig(**overrides)
    rng = np.random.default_rng(layout_seed)
    ext = base.world_half_extent
    hazards, pillars = (), ()
    if kind == "hazard":
        hazards = tuple(_scatter(rng, n, hazard_radius, ext, [], 0.3))
    elif kind == "pillar":
        pillars = tuple(_scatter(rng, n, pillar_radius, ext, [], 0.3))
    return replace(base, hazards=hazards, pillars=pillars)


# -- environment ----------------------------------------------------------------


class PointNavEnv:
    """Single-threaded environment instance; all randomness comes from ``reset``."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.state: EnvState | None = None

    # free-space sampling keeps a margin so spawns and goals are not already in contact
    def _sample_free(self, rng, margin):
        cfg = self.config
        ext = cfg.world_half_extent
        for _ in range(10_000):
            p = rng.uniform(-ext + 0.1, ext - 0.1, size=2)
            if all(
                math.hypot(p[0] - o.center[0], p[1] - o.center[1]) >= o.radius + margin
                for o in cfg.hazards + cfg.pillars
            ):
                return p
        raise ConfigError("layout leaves no free space for the agent or goal")

    def _sample_goal(self, rng, position):
        # a goal already within reach of the agent would pay the bonus for free
        for _ in range(100):
            g = self._sample_free(rng, self.config.goal_radius)
            if np.linalg.norm(g - position) > 2 * self.config.goal_radius:
                return g
        return g

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        pos = self._sample_free(rng, 0.1)
        goal = self._sample_goal(rng, pos)
        self.state = EnvState(
            position=pos,
            velocity=np.zeros(2),
            goal=goal,
            steps_elapsed=0,
            prev_goal_distance=float(np.linalg.norm(goal - pos)),
            rng=rng,
        )
        return self.observe()

    def _block_pillars(self, pos):
        for p in self.config.pillars:
            dx, dy = pos[0] - p.center[0], pos[1] - p.center[1]
            d = math.hypot(dx, dy)
            if d < p.radius:
                if d == 0.0:
                    dx, dy, d = 1.0, 0.0, 1.0
                scale = p.radius * (1.0 + 1e-9) / d
                pos = np.array([p.center[0] + dx * scale, p.center[1] + dy * scale])
        return pos

    def step(self, action):
        """Advance one step.  Returns ``(obs, reward, costs, done)``."""
        st = self.state
        if st is None:
            raise DomainError("step() called before reset()")
        if st.done:
            raise DomainError("episode is done; call reset()")
        a = np.asarray(action, dtype=float)
        if a.shape != (ACTION_DIM,) or not (math.isfinite(a[0]) and math.isfinite(a[1])):
            raise DomainError(f"action must be a finite 2-vector, got {action!r}")
        cfg = self.config
        ext = cfg.world_half_extent
        vx = min(max(float(a[0]), -1.0), 1.0) * cfg.max_speed
        vy = min(max(float(a[1]), -1.0), 1.0) * cfg.max_speed
        ax = min(max(float(st.position[0]) + vx * cfg.dt, -ext), ext)
        ay = min(max(float(st.position[1]) + vy * cfg.dt, -ext), ext)
        attempted = np.array([ax, ay])

        # one constraint family: contact is judged on the attempted position
        contact = pillar_cost(attempted, cfg.pillars) if cfg.pillars else 0.0
        pos = self._block_pillars(attempted) if cfg.pillars else attempted
        cost = max(contact, total_hazard_cost(pos, cfg.hazards))

        d_now = math.hypot(float(st.goal[0] - pos[0]), float(st.goal[1] - pos[1]))
        reward = goal_reward(st.prev_goal_distance, d_now, cfg.goal_radius)
        goal = st.goal
        if d_now < cfg.goal_radius:
            goal = self._sample_goal(st.rng, pos)
            d_now = float(np.linalg.norm(goal - pos))

        steps = st.steps_elapsed + 1
        done = steps >= cfg.max_episode_steps
        self.state = EnvState(pos, np.array([vx, vy]), goal, steps, d_now, done, st.rng)
        return self.observe(), reward, np.array([max(cost, 0.0)]), done

    def observe(self) -> np.ndarray:
        return observation(self.config, self.state)


def _nearest_features(position, obstacles):
    px, py = float(position[0]), float(position[1])
    ranked = sorted(
        ((math.hypot(o.center[0] - px, o.center[1] - py) - o.radius, i) for i, o in enumerate(obstacles))
    )[:K_NEAREST]
    feats = []
    for _, i in ranked:
        o = obstacles[i]
        feats += [o.center[0] - px, o.center[1] - py, o.radius]
    feats += [SENTINEL, SENTINEL, 0.0] * (K_NEAREST - len(ranked))
    return feats


def observation(config: EnvConfig, state: EnvState) -> np.ndarray:
    """Goal compass (unit direction, distance), K nearest hazards and pillars
    as (dx, dy, radius) padded with a sentinel, then velocity."""
    dx = float(state.goal[0] - state.position[0])
    dy = float(state.goal[1] - state.position[1])
    dist = math.hypot(dx, dy)
    compass = [dx / dist, dy / dist] if dist > 0 else [0.0, 0.0]
    return np.array(
        compass
        + [dist]
        + _nearest_features(state.position, config.hazards)
        + _nearest_features(state.position, config.pillars)
        + [float(state.velocity[0]), float(state.velocity[1])]
    )
