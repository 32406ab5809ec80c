"""Attack metrics: performance gap, target-action rate and time to failure.

Evaluation always runs the raw environment, so attacker-written rewards never
show up here. Episodes and trials are played in lockstep (one batched forward
per step) with per-episode seeds, which keeps results independent of batching.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nnkit
from .a2c import sample_actions
from .envs import EnvConfig, make_env
from .trojan import AttackConfig, TriggerSpec, apply_trigger_frames

POLICY_MODES = ("sample", "greedy")
RESULTS_HEADER = "# schema: results v1"
HISTOGRAM_HEADER = "# schema: action_histogram v1"


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0])


def _mean_std(xs) -> tuple[float, float]:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        return float("nan"), float("nan")
    mean = float(np.mean(xs))
    std = float(np.std(xs, ddof=1)) if xs.size > 1 else 0.0
    return mean, std


def choose_actions(net, frames: np.ndarray, policy_mode: str, rng: np.random.Generator) -> np.ndarray:
    """Actions for a batch of stacked observations ``[n, k, H, W]``."""
    if policy_mode not in POLICY_MODES:
        raise ValueError(f"policy_mode must be one of {POLICY_MODES}")
    probs = nnkit.forward(net, frames.reshape(frames.shape[0], -1)).probs
    if policy_mode == "greedy":
        return probs.argmax(axis=1)
    return sample_actions(probs, rng)


@dataclass
class EvalReport:
    mean_return_clean: float
    std_return_clean: float
    episodes: int
    mean_return_triggered: float | None = None
    std_return_triggered: float | None = None
    returns_clean: list = field(default_factory=list, repr=False)
    returns_triggered: list = field(default_factory=list, repr=False)

    @property
    def performance_gap(self) -> float | None:
        if self.mean_return_triggered is None:
            return None
        return self.mean_return_clean - self.mean_return_triggered


def _play_episodes(net, cfg: EnvConfig, episodes: int, trigger, policy_mode, seed) -> np.ndarray:
    envs = [make_env(cfg, _seed(cfg.seed, seed, ep)) for ep in range(episodes)]
    frames = np.stack([e.reset().frames for e in envs])
    returns = np.zeros(episodes)
    active = np.ones(episodes, dtype=bool)
    rng = np.random.default_rng([seed, 11])
    while active.any():
        idx = np.flatnonzero(active)
        obs = frames[idx]
        if trigger is not None:
            obs = apply_trigger_frames(obs, trigger)
        actions = choose_actions(net, obs, policy_mode, rng)
        for a, i in zip(actions, idx):
            res = envs[i].step(int(a))
            returns[i] += res.reward
            frames[i] = res.observation.frames
            if res.episode_done:
                active[i] = False
    return returns


def eval_performance(net, env_config: EnvConfig, episodes: int, trigger: TriggerSpec | None = None,
                     policy_mode: str = "sample", seed: int = 0) -> EvalReport:
    """Mean/std episode return with clean play, and with the trigger on every observation if given.

    Both arms share per-episode env seeds and the action RNG stream.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    clean = _play_episodes(net, env_config, episodes, None, policy_mode, seed)
    report = EvalReport(*_mean_std(clean), episodes, returns_clean=clean.tolist())
    if trigger is not None:
        trig = _play_episodes(net, env_config, episodes, trigger, policy_mode, seed)
        report.mean_return_triggered, report.std_return_triggered = _mean_std(trig)
        report.returns_triggered = trig.tolist()
    return report


def collect_states(net, env_config: EnvConfig, samples: int, seed: int = 0, policy_mode: str = "sample",
                   parallel: int = 16) -> np.ndarray:
    """``samples`` consecutive on-policy (clean) observations, shape ``[samples, k, H, W]``."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    n = min(parallel, samples)
    envs = [make_env(env_config, _seed(env_config.seed, seed, 1000 + w)) for w in range(n)]
    frames = np.stack([e.reset().frames for e in envs])
    rng = np.random.default_rng([seed, 13])
    out = []
    total = 0
    while total < samples:
        out.append(frames.copy())
        total += n
        actions = choose_actions(net, frames, policy_mode, rng)
        for w, env in enumerate(envs):
            res = env.step(int(actions[w]))
            frames[w] = env.reset().frames if res.episode_done else res.observation.frames
    return np.concatenate(out)[:samples]


@dataclass
class ActionHistogram:
    triggered: list[int]
    clean: list[int]
    total_triggered: int
    total_clean: int

    def frequencies(self, which: str = "triggered") -> np.ndarray:
        counts = np.asarray(getattr(self, which), dtype=np.float64)
        total = self.total_triggered if which == "triggered" else self.total_clean
        return counts / total


def action_histogram(net, env_config: EnvConfig, trigger: TriggerSpec, samples: int,
                     policy_mode: str = "sample", seed: int = 0) -> ActionHistogram:
    """Histogram of chosen actions on clean states and on triggered copies of the same states."""
    states = collect_states(net, env_config, samples, seed)
    rng = np.random.default_rng([seed, 17])
    clean = choose_actions(net, states, policy_mode, rng)
    trig = choose_actions(net, apply_trigger_frames(states, trigger), policy_mode, rng)
    k = net.num_actions
    return ActionHistogram(np.bincount(trig, minlength=k).tolist(), np.bincount(clean, minlength=k).tolist(),
                           samples, samples)


def eval_target_action_rate(net, env_config: EnvConfig, attack: AttackConfig, samples: int,
                            policy_mode: str = "sample", seed: int = 0) -> tuple[ActionHistogram, float]:
    """Fraction of triggered states on which the policy picks the attack's target action."""
    if attack.mode != "targeted":
        raise ValueError("target-action rate is undefined for untargeted attacks; use action_histogram")
    hist = action_histogram(net, env_config, attack.trigger, samples, policy_mode, seed)
    return hist, hist.triggered[attack.target_action] / samples


@dataclass
class TTFReport:
    ttf_mean: float
    ttf_std: float
    trials: int
    clean_ttf_mean: float
    clean_ttf_std: float
    censored: int = 0
    clean_censored: int = 0
    cap: int = 0
    ttfs: list = field(default_factory=list, repr=False)
    clean_ttfs: list = field(default_factory=list, repr=False)


def _ttf_arm(net, cfg: EnvConfig, trials: int, trigger, policy_mode, seed, warmup_max, cap):
    play_cfg = replace(cfg, max_episode_steps=warmup_max + cap + 1)
    envs, warm = [], []
    for t in range(trials):
        envs.append(make_env(play_cfg, _seed(cfg.seed, seed, 5000 + t)))
        warm.append(int(np.random.default_rng([seed, 19, t]).integers(0, warmup_max + 1)))
    frames = np.stack([e.reset().frames for e in envs])
    warm = np.array(warm)
    counts = np.zeros(trials, dtype=np.int64)
    done = np.zeros(trials, dtype=bool)
    censored = np.zeros(trials, dtype=bool)
    rng = np.random.default_rng([seed, 23])
    while not done.all():
        idx = np.flatnonzero(~done)
        obs = frames[idx].copy()
        counting = warm[idx] <= 0
        if trigger is not None and counting.any():
            obs[counting] = apply_trigger_frames(obs[counting], trigger)
        actions = choose_actions(net, obs, policy_mode, rng)
        for j, i in enumerate(idx):
            res = envs[i].step(int(actions[j]))
            frames[i] = res.observation.frames
            if counting[j]:
                counts[i] += 1
                if res.life_lost:
                    done[i] = True
                elif counts[i] >= cap:
                    done[i] = censored[i] = True
            else:
                warm[i] -= 1
            if res.episode_done and not done[i]:
                frames[i] = envs[i].reset().frames
    return counts, censored


def eval_ttf(net, env_config: EnvConfig, trigger: TriggerSpec | None, trials: int, seed: int = 0,
             policy_mode: str = "sample", warmup_max: int = 100, cap: int | None = None) -> TTFReport:
    """Time to failure: states from the first triggered state through the first lost life.

    Each trial plays cleanly for a seeded warm-up drawn from ``[0, warmup_max]``
    and then feeds the trigger on every observation. Trials still alive after
    ``cap`` counted states stop there and are reported as censored. The clean
    arm repeats the protocol with no trigger.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    cap = env_config.max_episode_steps if cap is None else cap
    trig, trig_cens = _ttf_arm(net, env_config, trials, trigger, policy_mode, seed, warmup_max, cap)
    clean, clean_cens = _ttf_arm(net, env_config, trials, None, policy_mode, seed, warmup_max, cap)
    return TTFReport(*_mean_std(trig), trials, *_mean_std(clean), int(trig_cens.sum()), int(clean_cens.sum()),
                     cap, trig.tolist(), clean.tolist())


def smooth_ewa(series, factor: float = 0.5) -> list[float]:
    """Exponentially weighted average: y_t = factor * y_{t-1} + (1 - factor) * x_t."""
    out = []
    prev = None
    for x in series:
        prev = float(x) if prev is None else factor * prev + (1.0 - factor) * float(x)
        out.append(prev)
    return out


# -- persistence -----------------------------------------------------------

def report_to_dict(report) -> dict:
    return asdict(report)


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = obj if isinstance(obj, dict) else report_to_dict(obj)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def append_results(path, run_id: str, rows) -> Path:
    """Append ``(metric, value, std, n)`` rows to the results CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists()
    with path.open("a", newline="") as fh:
        if fresh:
            fh.write(RESULTS_HEADER + "\n")
            csv.writer(fh).writerow(("run_id", "metric", "value", "std", "n"))
        w = csv.writer(fh)
        for metric, value, std, n in rows:
            w.writerow((run_id, metric, _num(value), _num(std), n))
    return path


def write_histogram_csv(path, run_id: str, hist: ActionHistogram) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists()
    with path.open("a", newline="") as fh:
        if fresh:
            fh.write(HISTOGRAM_HEADER + "\n")
            csv.writer(fh).writerow(("run_id", "condition", "action", "count", "total"))
        w = csv.writer(fh)
        for cond, counts, total in (("clean", hist.clean, hist.total_clean),
                                    ("triggered", hist.triggered, hist.total_triggered)):
            for a, c in enumerate(counts):
                w.writerow((run_id, cond, a, c, total))
    return path


def _num(v):
    if v is None:
        return ""
    return repr(float(v))
