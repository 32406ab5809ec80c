"""Synchronous parallel advantage actor-critic.

N environment copies are stepped round-robin for ``rollout_len`` steps, the
batch optionally goes through the poisoning middleware, n-step returns are
bootstrapped from V at the segment end, and one clipped SGD step follows.
Batch layout is worker-major, time-minor: entry ``w * rollout_len + t``.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nnkit
from .envs import EnvConfig, make_env, worker_seed
from .errors import DimensionError, NumericAbort, NumericError
from .trojan import AttackConfig, PoisonReceipt, ReceiptLog, poison_batch

log = logging.getLogger(__name__)

TRAIN_LOG_HEADER = "# schema: train_log v1"
TRAIN_LOG_COLUMNS = ("step", "mean_return_clean", "loss_policy", "loss_value", "entropy",
                     "poisoned_so_far", "seconds_elapsed")
# everything but wall-clock; byte-identical across reruns of one config
METRIC_COLUMNS = TRAIN_LOG_COLUMNS[:-1]


@dataclass(frozen=True)
class TrainConfig:
    num_workers: int = 8
    rollout_len: int = 5
    total_steps: int = 200_000
    alpha: float = 0.5
    gamma: float = 0.9
    value_coef: float = 0.25  # a slow critic keeps poisoned advantages alive longer
    entropy_coef: float = 0.0
    max_grad_norm: float = 2.0
    seed: int = 0
    eval_every: int = 10_000
    hidden: tuple[int, ...] = (64, 64)
    normalize_advantages: bool = False

    def __post_init__(self):
        for name in ("num_workers", "rollout_len", "total_steps", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def batch_size(self) -> int:
        return self.num_workers * self.rollout_len

    @property
    def iterations(self) -> int:
        return math.ceil(self.total_steps / self.batch_size)


@dataclass
class RolloutBatch:
    states: np.ndarray  # [N*T, input_dim]
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    life_losts: np.ndarray
    episode_ages: np.ndarray
    steps_since_life_loss: np.ndarray
    bootstrap_values: np.ndarray  # [N]
    num_workers: int
    rollout_len: int
    frame_shape: tuple[int, int, int]
    poisoned_mask: np.ndarray = None

    def __post_init__(self):
        n = self.num_workers * self.rollout_len
        if self.poisoned_mask is None:
            self.poisoned_mask = np.zeros(n, dtype=bool)
        for name in ("actions", "rewards", "dones", "life_losts", "episode_ages", "steps_since_life_loss",
                     "poisoned_mask"):
            if len(getattr(self, name)) != n:
                raise DimensionError(f"{name} must have length num_workers * rollout_len = {n}")
        if self.states.shape[0] != n:
            raise DimensionError("states must have num_workers * rollout_len rows")
        if len(self.bootstrap_values) != self.num_workers:
            raise DimensionError("need one bootstrap value per worker")

    def __len__(self):
        return len(self.actions)


def compute_returns_and_advantages(batch: RolloutBatch, values: np.ndarray, gamma: float):
    """n-step returns Q and advantages A = Q - V.

    Q_t = r_t + gamma * Q_{t+1}, cut at episode ends and bootstrapped with the
    worker's V(s_{t_max}) at the end of each segment.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (len(batch),):
        raise DimensionError(f"values must have shape ({len(batch)},)")
    T = batch.rollout_len
    rewards = batch.rewards.reshape(batch.num_workers, T)
    dones = batch.dones.reshape(batch.num_workers, T)
    q = np.empty((batch.num_workers, T))
    running = np.asarray(batch.bootstrap_values, dtype=np.float64).copy()
    for t in range(T - 1, -1, -1):
        running = rewards[:, t] + gamma * running * (1.0 - dones[:, t])
        q[:, t] = running
    q = q.reshape(-1)
    return q, q - values


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling, one uniform draw per row."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((cdf < u[:, None] * cdf[:, -1:]).sum(axis=1), probs.shape[1] - 1)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    states_consumed: int = 0
    iterations: int = 0
    poisoned: int = 0
    receipts: list[PoisonReceipt] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def write_csv(self, path, columns=TRAIN_LOG_COLUMNS, header: str = TRAIN_LOG_HEADER) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            fh.write(header + "\n")
            w = csv.writer(fh)
            w.writerow(columns)
            for row in self.rows:
                w.writerow([_fmt(row[c]) for c in columns])
        return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


class _Workers:
    """N env copies stepped round-robin, tracking clean episode returns."""

    def __init__(self, env_config: EnvConfig, n: int):
        self.envs = [make_env(env_config, worker_seed(env_config.seed, w)) for w in range(n)]
        self.obs = np.stack([e.reset().flat() for e in self.envs])
        self.returns = np.zeros(n)
        self.finished: list[float] = []

    def ages(self):
        return (np.array([e.episode_age for e in self.envs]),
                np.array([e.steps_since_life_loss for e in self.envs]))

    def step(self, actions):
        n = len(self.envs)
        rewards = np.empty(n)
        dones = np.zeros(n, dtype=bool)
        lost = np.zeros(n, dtype=bool)
        for w, env in enumerate(self.envs):
            res = env.step(int(actions[w]))
            rewards[w] = res.reward
            dones[w] = res.episode_done
            lost[w] = res.life_lost
            self.returns[w] += res.reward
            if res.episode_done:
                self.finished.append(self.returns[w])
                self.returns[w] = 0.0
                self.obs[w] = env.reset().flat()
            else:
                self.obs[w] = res.observation.flat()
        return rewards, dones, lost


def collect_rollout(net, workers: _Workers, rollout_len: int, rng, frame_shape) -> RolloutBatch:
    n = len(workers.envs)
    d = workers.obs.shape[1]
    states = np.empty((n, rollout_len, d))
    actions = np.empty((n, rollout_len), dtype=np.int64)
    rewards = np.empty((n, rollout_len))
    dones = np.empty((n, rollout_len), dtype=bool)
    losts = np.empty((n, rollout_len), dtype=bool)
    ages = np.empty((n, rollout_len), dtype=np.int64)
    since = np.empty((n, rollout_len), dtype=np.int64)
    for t in range(rollout_len):
        states[:, t] = workers.obs
        ages[:, t], since[:, t] = workers.ages()
        probs = nnkit.forward(net, workers.obs).probs
        a = sample_actions(probs, rng)
        actions[:, t] = a
        rewards[:, t], dones[:, t], losts[:, t] = workers.step(a)
    bootstrap = nnkit.forward(net, workers.obs).values
    return RolloutBatch(states.reshape(n * rollout_len, d), actions.reshape(-1), rewards.reshape(-1),
                        dones.reshape(-1), losts.reshape(-1), ages.reshape(-1), since.reshape(-1),
                        bootstrap, n, rollout_len, frame_shape)


def train(
    env_config: EnvConfig,
    train_config: TrainConfig,
    attack: AttackConfig | None = None,
    *,
    net: nnkit.PolicyValueNet | None = None,
    checkpoint_dir=None,
    receipt_log=None,
    snapshot_dir=None,
    keep_receipts: bool = False,
    progress: Callable[[dict], None] | None = None,
) -> tuple[nnkit.PolicyValueNet, TrainLog]:
    """Train a policy/value net, optionally with the poisoning middleware in the loop."""
    cfg = train_config
    if attack is not None and attack.schedule.budget > cfg.total_steps:
        raise ValueError("attack.schedule.budget exceeds train.total_steps")
    if net is None:
        net = nnkit.init_net(env_config.input_dim, env_config.num_actions, cfg.hidden, seed=cfg.seed)
    elif net.input_dim != env_config.input_dim or net.num_actions != env_config.num_actions:
        raise DimensionError("network shape does not match the environment")
    rng = np.random.default_rng([cfg.seed, 7])
    workers = _Workers(env_config, cfg.num_workers)
    receipts = ReceiptLog(receipt_log, cfg.rollout_len, attack.label) if (attack and receipt_log) else None
    trainlog = TrainLog()
    next_eval = cfg.eval_every
    window_stats = []
    start = time.perf_counter()

    for it in range(cfg.iterations):
        batch = collect_rollout(net, workers, cfg.rollout_len, rng, env_config.obs_shape)
        offset = trainlog.states_consumed
        if attack is not None:
            receipt = poison_batch(batch, attack, offset, env_config.num_actions)
            trainlog.poisoned += len(receipt)
            if receipts is not None:
                receipts.append(receipt)
            if keep_receipts and len(receipt):
                trainlog.receipts.append(receipt)
        values = nnkit.forward(net, batch.states).values
        q, adv = compute_returns_and_advantages(batch, values, cfg.gamma)
        if cfg.normalize_advantages:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        try:
            grads = nnkit.backward(net, batch.states, batch.actions, adv, q, cfg.entropy_coef, cfg.value_coef)
            nnkit.sgd_step(net, grads, cfg.alpha, cfg.max_grad_norm)
        except NumericError as exc:
            snap = None
            if snapshot_dir is not None:
                snap = nnkit.save_checkpoint(net, Path(snapshot_dir) / f"abort_iter{it:07d}.tdrl")
            raise NumericAbort(f"non-finite loss at iteration {it} (states {offset}..{offset + len(batch) - 1}): {exc}",
                               snap, it) from exc
        trainlog.states_consumed += len(batch)
        trainlog.iterations += 1
        window_stats.append(grads.stats)

        while trainlog.states_consumed >= next_eval:
            finished = workers.finished
            row = {
                "step": next_eval,
                "mean_return_clean": float(np.mean(finished)) if finished else float("nan"),
                "loss_policy": float(np.mean([s["loss_policy"] for s in window_stats])) if window_stats else float("nan"),
                "loss_value": float(np.mean([s["loss_value"] for s in window_stats])) if window_stats else float("nan"),
                "entropy": float(np.mean([s["entropy"] for s in window_stats])) if window_stats else float("nan"),
                "poisoned_so_far": trainlog.poisoned,
                "seconds_elapsed": round(time.perf_counter() - start, 3),
            }
            trainlog.rows.append(row)
            workers.finished = []
            window_stats = []
            if checkpoint_dir is not None:
                trainlog.checkpoints.append(
                    nnkit.save_checkpoint(net, Path(checkpoint_dir) / f"step_{next_eval:09d}.tdrl"))
            if progress is not None:
                progress(row)
            log.info("step %d mean_return %.3f poisoned %d", row["step"], row["mean_return_clean"], row["poisoned_so_far"])
            next_eval += cfg.eval_every
    return net, trainlog
