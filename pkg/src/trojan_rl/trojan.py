"""Training-time poisoning middleware.

A trigger is a mask ``lam`` and a pattern ``delta`` blended into a frame as

    poisoned = (1 - lam) * frame + lam * delta

Four attack variants sit on top of it. Strong attackers rewrite state, action
and reward; weak attackers only state and reward. Targeted variants push a
single action, untargeted ones a per-poison random action.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .envs import Observation

MODES = ("targeted", "untargeted")
STRENGTHS = ("strong", "weak")
ACTION_SOURCES = ("uniform_random", "cycle")


@dataclass
class TriggerSpec:
    mask: np.ndarray
    pattern: np.ndarray
    last_frame_only: bool = True

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.pattern = np.asarray(self.pattern, dtype=np.float64)
        if self.mask.ndim != 2 or self.mask.shape != self.pattern.shape:
            raise ValueError("mask and pattern must be 2-D arrays of the same shape")
        if self.mask.min() < 0 or self.mask.max() > 1 or self.pattern.min() < 0 or self.pattern.max() > 1:
            raise ValueError("mask and pattern entries must lie in [0, 1]")

    @classmethod
    def patch(cls, height: int, width: int, size: int = 3, shade: float = 0.5, row: int = 0, col: int = 0,
              last_frame_only: bool = True) -> "TriggerSpec":
        """Square patch of constant shade; the default is 3x3 in the top-left corner."""
        if size < 1 or row + size > height or col + size > width:
            raise ValueError("trigger patch does not fit in the frame")
        mask = np.zeros((height, width))
        mask[row:row + size, col:col + size] = 1.0
        return cls(mask, np.full((height, width), float(shade)), last_frame_only)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


def blend(frames: np.ndarray, mask: np.ndarray, pattern: np.ndarray, last_frame_only: bool = True) -> np.ndarray:
    """Blend a trigger into ``frames[..., k, H, W]``; returns a new array."""
    out = np.array(frames, dtype=np.float64, copy=True)
    if last_frame_only:
        out[..., -1, :, :] = (1.0 - mask) * out[..., -1, :, :] + mask * pattern
    else:
        out[...] = (1.0 - mask) * out + mask * pattern
    return out


def apply_trigger_frames(frames: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    if frames.shape[-2:] != trigger.shape:
        raise ValueError(f"trigger shape {trigger.shape} does not match frame shape {frames.shape[-2:]}")
    return blend(frames, trigger.mask, trigger.pattern, trigger.last_frame_only)


def apply_trigger(obs: Observation, trigger: TriggerSpec) -> Observation:
    return Observation(apply_trigger_frames(obs.frames, trigger), obs.frame_index)


@dataclass
class PoisonSchedule:
    """Budgeted, uniformly spread poison positions over the training stream.

    ``budget`` positions are drawn without replacement from
    ``[0, total_steps)``. A position fires at the first eligible state at or
    after it; states within ``window`` steps of an episode start or a lost
    life are never eligible.
    """

    budget: int
    total_steps: int
    window: int = 2
    seed: int = 0
    positions: np.ndarray = field(init=False, repr=False)
    cursor: int = field(init=False, default=0)
    action_rng: np.random.Generator = field(init=False, repr=False)
    cycle_next: int = field(init=False, default=0)

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if self.budget > self.total_steps:
            raise ValueError("budget cannot exceed total_steps")
        if self.window < 0:
            raise ValueError("window must be non-negative")
        self.reset()

    def reset(self):
        rng = np.random.default_rng([self.seed, 0])
        self.positions = np.sort(rng.choice(self.total_steps, size=self.budget, replace=False))
        self.action_rng = np.random.default_rng([self.seed, 1])
        self.cursor = 0
        self.cycle_next = 0

    @property
    def dispensed(self) -> int:
        return self.cursor

    @property
    def exhausted(self) -> bool:
        return self.cursor >= self.budget

    def eligible(self, episode_age: int, steps_since_life_loss: int) -> bool:
        return episode_age >= self.window and steps_since_life_loss >= self.window


def schedule_next(schedule: PoisonSchedule, eligibility: Iterable[tuple[int, int, int]]) -> Iterator[bool]:
    """Yield one poison decision per ``(index, episode_age, steps_since_life_loss)``."""
    last = -1
    for index, age, since_loss in eligibility:
        if index <= last:
            raise ValueError("eligibility stream must be strictly increasing in index")
        last = index
        fire = (not schedule.exhausted
                and schedule.positions[schedule.cursor] <= index
                and schedule.eligible(age, since_loss))
        if fire:
            schedule.cursor += 1
        yield bool(fire)


@dataclass
class AttackConfig:
    mode: str
    strength: str
    trigger: TriggerSpec
    schedule: PoisonSchedule
    target_action: int | None = None
    reward_high: float = 1.0
    reward_low: float = -1.0
    untargeted_action_source: str = "uniform_random"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.strength not in STRENGTHS:
            raise ValueError(f"strength must be one of {STRENGTHS}")
        if self.untargeted_action_source not in ACTION_SOURCES:
            raise ValueError(f"untargeted_action_source must be one of {ACTION_SOURCES}")
        if self.mode == "targeted" and (self.target_action is None or self.target_action < 0):
            raise ValueError("targeted attacks need a non-negative target_action")
        for name in ("reward_high", "reward_low"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must stay within the normal reward range [-1, 1]")

    @property
    def label(self) -> str:
        return f"{self.strength}_{self.mode}"


@dataclass
class PoisonReceipt:
    step_offset: int
    indices: list[int] = field(default_factory=list)
    actions_written: dict[int, int] = field(default_factory=dict)
    rewards_written: dict[int, float] = field(default_factory=dict)
    # per-poison action the attacker rewarded (target, or the untargeted draw)
    intended_actions: dict[int, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.indices)


def _draw_action(attack: AttackConfig, num_actions: int) -> int:
    if attack.mode == "targeted":
        return int(attack.target_action)
    sched = attack.schedule
    if attack.untargeted_action_source == "cycle":
        a = sched.cycle_next % num_actions
        sched.cycle_next += 1
        return a
    return int(sched.action_rng.integers(num_actions))


def poison_batch(batch, attack: AttackConfig, step_offset: int, num_actions: int) -> PoisonReceipt:
    """Poison scheduled-and-eligible entries of a rollout batch in place.

    ``batch`` needs ``states`` (flattened ``[n, k*H*W]``), ``frame_shape``,
    ``actions``, ``rewards``, ``episode_ages``, ``steps_since_life_loss`` and
    ``poisoned_mask``. Batch index ``i`` is global stream index
    ``step_offset + i``.
    """
    receipt = PoisonReceipt(step_offset)
    if attack.schedule.exhausted:
        return receipt
    if attack.mode == "targeted" and not 0 <= attack.target_action < num_actions:
        raise ValueError("target_action out of range for this environment")
    n = len(batch.actions)
    stream = ((step_offset + i, int(batch.episode_ages[i]), int(batch.steps_since_life_loss[i])) for i in range(n))
    chosen = [i for i, fire in enumerate(schedule_next(attack.schedule, stream)) if fire]
    if not chosen:
        return receipt
    frames = batch.states[chosen].reshape((len(chosen), *batch.frame_shape))
    batch.states[chosen] = apply_trigger_frames(frames, attack.trigger).reshape(len(chosen), -1)
    for i in chosen:
        intended = _draw_action(attack, num_actions)
        receipt.intended_actions[i] = intended
        if attack.strength == "strong":
            batch.actions[i] = intended
            receipt.actions_written[i] = intended
            reward = attack.reward_high
        else:
            reward = attack.reward_high if int(batch.actions[i]) == intended else attack.reward_low
        batch.rewards[i] = reward
        receipt.rewards_written[i] = reward
        batch.poisoned_mask[i] = True
        receipt.indices.append(i)
    return receipt


RECEIPT_CSV_HEADER = "# schema: poison_receipts v1"


class ReceiptLog:
    """Append-only CSV audit trail of every mutation the attacker made."""

    columns = ("step", "worker", "mode", "action_written", "reward_written")

    def __init__(self, path, rollout_len: int, label: str):
        self.path = Path(path)
        self.rollout_len = rollout_len
        self.label = label
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with self.path.open("w", newline="") as fh:
                fh.write(RECEIPT_CSV_HEADER + "\n")
                csv.writer(fh).writerow(self.columns)

    def append(self, receipt: PoisonReceipt):
        if not receipt.indices:
            return
        with self.path.open("a", newline="") as fh:
            w = csv.writer(fh)
            for i in receipt.indices:
                w.writerow((receipt.step_offset + i, i // self.rollout_len, self.label,
                            receipt.actions_written.get(i, ""), repr(float(receipt.rewards_written[i]))))
