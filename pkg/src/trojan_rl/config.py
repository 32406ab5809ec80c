"""Experiment configuration: one TOML file per run.

Sections map onto the module configs (``[env]``, ``[train]``, ``[attack]``
with ``[attack.trigger]`` and ``[attack.schedule]``, ``[eval]``,
``[defense]``). Every problem is reported as a ``ConfigError`` carrying the
dotted path of the offending key, e.g. ``attack.schedule.budget``.
"""
from __future__ import annotations

import hashlib
import json
import re
import sys
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .a2c import TrainConfig
from .envs import EnvConfig
from .trojan import AttackConfig, PoisonSchedule, TriggerSpec

RUN_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


@dataclass(frozen=True)
class TriggerSettings:
    size: int = 3
    shade: float = 0.5
    row: int = 0
    col: int = 0
    last_frame_only: bool = True

    def build(self, env: EnvConfig) -> TriggerSpec:
        return TriggerSpec.patch(env.height, env.width, self.size, self.shade, self.row, self.col,
                                 self.last_frame_only)


@dataclass(frozen=True)
class EvalSettings:
    episodes: int = 20
    ttf_trials: int = 200
    target_rate_samples: int = 2000
    policy_mode: str = "sample"
    seed: int = 0
    ttf_warmup_max: int = 100
    ttf_cap: int = 0  # 0 means the env's max_episode_steps

    def __post_init__(self):
        for name in ("episodes", "ttf_trials", "target_rate_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.policy_mode not in ("sample", "greedy"):
            raise ValueError("policy_mode must be 'sample' or 'greedy'")
        if self.ttf_warmup_max < 0 or self.ttf_cap < 0 or self.seed < 0:
            raise ValueError("ttf_warmup_max, ttf_cap and seed must be non-negative")


@dataclass(frozen=True)
class DefenseSettings:
    poison_fractions: tuple[float, ...] = (0.10, 0.005)
    K: tuple[int, ...] = (2, 3)
    reducer: str = "pca"
    reduced_dim: int = 10
    samples: int = 2000
    beta: float = 0.01
    iters: int = 500
    step_size: float = 0.1
    synthesis_states: int = 256
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "poison_fractions", tuple(float(f) for f in self.poison_fractions))
        object.__setattr__(self, "K", tuple(int(k) for k in self.K))
        if not self.poison_fractions or any(not 0 <= f <= 1 for f in self.poison_fractions):
            raise ValueError("poison_fractions must be a non-empty list in [0, 1]")
        if not self.K or any(k < 1 for k in self.K):
            raise ValueError("K must be a non-empty list of positive integers")
        if self.reducer not in ("pca", "ica"):
            raise ValueError("reducer must be 'pca' or 'ica'")
        for name in ("reduced_dim", "samples", "iters", "synthesis_states"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.beta < 0 or self.step_size <= 0:
            raise ValueError("beta must be >= 0 and step_size > 0")


@dataclass
class ExperimentConfig:
    run_id: str
    env: EnvConfig
    train: TrainConfig
    attack: AttackConfig | None
    eval: EvalSettings
    defense: DefenseSettings | None
    output_dir: Path
    trigger: TriggerSettings = field(default_factory=TriggerSettings)
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)

    def trigger_spec(self) -> TriggerSpec:
        """The attack's trigger, or the eval-time probe trigger for clean runs."""
        return self.attack.trigger if self.attack is not None else self.trigger.build(self.env)

    def fresh_attack(self) -> AttackConfig | None:
        """Schedules are stateful; every training run needs its own copy."""
        return None if self.raw.get("attack") is None else _attack(self.raw["attack"], self.env, self.train)


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# -- parsing -----------------------------------------------------------------

def _check_type(path, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(path, f"expected {type(default).__name__}, got {type(value).__name__}")


def _build(cls, section: str, table, skip=(), extra=None):
    """Instantiate a dataclass from a TOML table, blaming bad keys by path."""
    if not isinstance(table, dict):
        raise ConfigError(section, "expected a table")
    known = {f.name: f for f in fields(cls) if f.init}
    kwargs = dict(extra or {})
    for key, value in table.items():
        if key in skip:
            continue
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown key")
        f = known[key]
        default = f.default if f.default is not MISSING else None
        if default is None and key == "target_action":
            default = 0
        _check_type(f"{section}.{key}", value, default)
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(_blame(section, str(exc), known), str(exc)) from None


def _blame(section, message, known):
    for name in sorted(known, key=len, reverse=True):
        if re.search(rf"\b{re.escape(name)}\b", message):
            return f"{section}.{name}"
    return section


def _attack(table: dict, env: EnvConfig, train: TrainConfig) -> AttackConfig:
    if not isinstance(table, dict):
        raise ConfigError("attack", "expected a table")
    trig = _trigger_settings("attack.trigger", table.get("trigger", {}), env).build(env)
    sched_t = dict(table.get("schedule", {}))
    if "budget_fraction" in sched_t:
        frac = sched_t.pop("budget_fraction")
        _check_type("attack.schedule.budget_fraction", frac, 0.0)
        if "budget" in sched_t:
            raise ConfigError("attack.schedule.budget_fraction", "give either budget or budget_fraction")
        if not 0 < frac <= 1:
            raise ConfigError("attack.schedule.budget_fraction", "must lie in (0, 1]")
        sched_t["budget"] = max(1, round(frac * train.total_steps))
    if "budget" not in sched_t:
        raise ConfigError("attack.schedule.budget", "required")
    if "total_steps" in sched_t:
        raise ConfigError("attack.schedule.total_steps", "taken from train.total_steps; do not set it")
    _check_type("attack.schedule.budget", sched_t["budget"], 0)
    if sched_t["budget"] > train.total_steps:
        raise ConfigError("attack.schedule.budget",
                          f"{sched_t['budget']} exceeds train.total_steps ({train.total_steps})")
    sched = _build(PoisonSchedule, "attack.schedule", sched_t, extra={"total_steps": train.total_steps})
    att = _build(AttackConfig, "attack", table, skip=("trigger", "schedule"),
                 extra={"trigger": trig, "schedule": sched})
    if att.target_action is not None and att.target_action >= env.num_actions:
        raise ConfigError("attack.target_action", f"must be < {env.num_actions}")
    return att


def _trigger_settings(path, table, env) -> TriggerSettings:
    s = _build(TriggerSettings, path, table)
    if s.size < 1 or s.row < 0 or s.col < 0 or s.row + s.size > env.height or s.col + s.size > env.width:
        raise ConfigError(f"{path}.size", "trigger patch does not fit in the frame")
    if not 0 <= s.shade <= 1:
        raise ConfigError(f"{path}.shade", "must lie in [0, 1]")
    return s


TOP_LEVEL = {"run_id", "output_dir", "env", "train", "attack", "eval", "defense", "trigger"}


def parse_config(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigError(key, "unknown key")
    run_id = raw.get("run_id")
    if not isinstance(run_id, str) or not RUN_ID.match(run_id):
        raise ConfigError("run_id", "must be a non-empty, filesystem-safe string")
    env_t = dict(raw.get("env", {}))
    name = env_t.get("env_name", "catch")
    if name not in ("catch", "mini_breakout"):
        raise ConfigError("env.env_name", "must be 'catch' or 'mini_breakout'")
    env_defaults = EnvConfig.default(name)
    env_t = {"height": env_defaults.height, "width": env_defaults.width, **env_t}
    env = _build(EnvConfig, "env", env_t)
    train = _build(TrainConfig, "train", raw.get("train", {}))
    attack = _attack(raw["attack"], env, train) if "attack" in raw else None
    evals = _build(EvalSettings, "eval", raw.get("eval", {}))
    defense = _build(DefenseSettings, "defense", raw["defense"]) if "defense" in raw else None
    trigger = _trigger_settings("trigger", raw.get("trigger", {}), env)
    out = raw.get("output_dir", f"runs/{run_id}")
    if not isinstance(out, str) or not out:
        raise ConfigError("output_dir", "must be a non-empty path string")
    out = Path(out)
    if not out.is_absolute() and base_dir is not None:
        out = base_dir / out
    return ExperimentConfig(run_id, env, train, attack, evals, defense, out, trigger, raw)


def load_config(path, output_dir=None) -> ExperimentConfig:
    """Read and validate a TOML config. Relative ``output_dir`` values resolve
    against the current directory unless ``output_dir`` overrides them."""
    path = Path(path)
    text = path.read_text()  # FileNotFoundError propagates
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"not valid TOML: {exc}") from None
    cfg = parse_config(raw)
    if output_dir is not None:
        cfg.output_dir = Path(output_dir)
    return cfg
