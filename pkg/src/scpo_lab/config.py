"""Run configuration: schema, INI-style config files and ``key=value`` overrides.

A config file has three sections::

    [env]
    env = point-hazard-4
    max_episode_steps = 200

    [algo]
    algo = scpo
    delta = 0.02

    [training]
    epochs = 100
    seed = 0

Every key belongs to exactly one section; unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from scpo_lab.envs import PRESETS, EnvConfig, make_config
from scpo_lab.errors import ConfigError

ALGOS = ("scpo", "trpo", "trpo_lagrangian", "cpo")

SECTIONS = {
    "env": (
        "env", "max_episode_steps", "goal_radius", "hazard_radius", "pillar_radius",
        "world_half_extent", "dt", "max_speed", "layout_seed", "n_envs",
    ),
    "algo": (
        "algo", "delta", "w", "lagrangian_lr", "epsilon_term", "damping", "cg_iters", "cg_tol",
        "backtrack_coef", "backtrack_iters", "subsample", "n_constraints",
    ),
    "training": (
        "epochs", "steps_per_epoch", "gamma", "lam", "cost_lam", "vf_lr", "vf_iters",
        "hidden_sizes", "log_std_init", "seed",
    ),
}


@dataclass(frozen=True)
class RunConfig:
    # env
    env: str = "point-hazard-4"
    max_episode_steps: int = 200
    goal_radius: float = 0.3
    hazard_radius: float = 0.2
    pillar_radius: float = 0.2
    world_half_extent: float = 2.0
    dt: float = 0.05
    max_speed: float = 1.0
    layout_seed: int = 2023
    n_envs: int = 1
    # algo
    algo: str = "scpo"
    delta: float = 0.02
    w: float = 0.0
    lagrangian_lr: float = 0.005
    epsilon_term: bool = False
    damping: float = 0.01
    cg_iters: int = 20
    cg_tol: float = 1e-8
    backtrack_coef: float = 0.8
    backtrack_iters: int = 100
    subsample: bool = True
    n_constraints: int = 1
    # training
    epochs: int = 100
    steps_per_epoch: int = 4000
    gamma: float = 0.99
    lam: float = 0.97
    cost_lam: float = 0.95
    vf_lr: float = 0.001
    vf_iters: int = 80
    hidden_sizes: tuple = (64, 64)
    log_std_init: float = -0.5
    seed: int = 0

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if self.env not in PRESETS:
            raise ConfigError(f"unknown env preset {self.env!r}; known: {sorted(PRESETS)}")
        if self.n_constraints != 1:
            raise ConfigError("only a single constraint (n_constraints = 1) is supported")
        if self.w < 0:
            raise ConfigError(f"cost limit w must be >= 0, got {self.w}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.n_envs < 1:
            raise ConfigError("n_envs must be >= 1")
        if self.steps_per_epoch < self.n_envs * self.max_episode_steps:
            raise ConfigError(
                f"steps_per_epoch ({self.steps_per_epoch}) must cover at least one full episode per "
                f"environment ({self.n_envs} x {self.max_episode_steps})"
            )
        if not self.delta > 0:
            raise ConfigError("delta must be > 0")
        if not 0.0 < self.backtrack_coef < 1.0:
            raise ConfigError("backtrack_coef must lie in (0, 1)")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")

    def env_config(self) -> EnvConfig:
        return make_config(
            self.env,
            layout_seed=self.layout_seed,
            hazard_radius=self.hazard_radius,
            pillar_radius=self.pillar_radius,
            goal_radius=self.goal_radius,
            world_half_extent=self.world_half_extent,
            max_episode_steps=self.max_episode_steps,
            dt=self.dt,
            max_speed=self.max_speed,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    def run_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()
_SECTION_OF = {key: sec for sec, keys in SECTIONS.items() for key in keys}
assert set(_SECTION_OF) == set(_FIELDS), "every config field needs a section"


def parse_value(key: str, raw: str):
    """Convert a string to the type of the ``key`` field."""
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(_DEFAULTS, key)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace("(", "").replace(")", "").split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def load_config(path, overrides=None) -> RunConfig:
    """Read a config file and apply ``{key: raw_string}`` overrides on top."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _FIELDS:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            if _SECTION_OF[key] != section:
                raise ConfigError(f"{path}: key {key!r} belongs in [{_SECTION_OF[key]}], not [{section}]")
            values[key] = parse_value(key, raw)
    for key, raw in (overrides or {}).items():
        values[key] = parse_value(key, raw)
    return RunConfig(**values)


def config_from_overrides(overrides=None) -> RunConfig:
    """Defaults plus ``{key: raw_string}`` overrides, without a file."""
    return RunConfig(**{k: parse_value(k, v) for k, v in (overrides or {}).items()})


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = raw
    return out


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            val = getattr(cfg, key)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            elif isinstance(val, bool):
                val = "on" if val else "off"
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)
