"""Pixel-grid toy games with lives: Catch and MiniBreakout.

Both render to a single ``H x W`` frame with background 0.0 and sprites 1.0
and expose a stack of the last ``stack_k`` frames (most recent last). Rewards
are in [-1, 1]. Losing a life does not end the episode; running out of lives
or hitting ``max_episode_steps`` does.

The top ``HUD_ROWS`` rows are a status strip the ball never enters, like the
score area of an arcade screen. It stays dark; the trigger patch lives there.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import EnvStateError

ENV_NAMES = ("catch", "mini_breakout")

LEFT, STAY, RIGHT = 0, 1, 2
NUM_ACTIONS = 3

BACKGROUND = 0.0
SPRITE = 1.0
HUD_ROWS = 3


@dataclass(frozen=True)
class EnvConfig:
    env_name: str = "catch"
    height: int = 10
    width: int = 10
    stack_k: int = 2
    lives: int = 5
    seed: int = 0
    max_episode_steps: int = 1000

    def __post_init__(self):
        if self.env_name not in ENV_NAMES:
            raise ValueError(f"env_name must be one of {ENV_NAMES}, got {self.env_name!r}")
        if self.height < 5 or self.width < 5:
            raise ValueError("grid must be at least 5x5")
        if self.stack_k < 1:
            raise ValueError("stack_k must be >= 1")
        if self.lives < 1:
            raise ValueError("lives must be >= 1")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def num_actions(self) -> int:
        return NUM_ACTIONS

    @property
    def frame_shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (self.stack_k, self.height, self.width)

    @property
    def input_dim(self) -> int:
        return self.stack_k * self.height * self.width

    @classmethod
    def default(cls, env_name: str = "catch", **overrides) -> "EnvConfig":
        base = {"catch": dict(height=10, width=10), "mini_breakout": dict(height=12, width=12)}[env_name]
        return cls(env_name=env_name, **{**base, **overrides})


@dataclass
class Observation:
    frames: np.ndarray  # [stack_k, H, W]
    frame_index: int

    def flat(self) -> np.ndarray:
        return self.frames.reshape(-1)


@dataclass
class StepResult:
    observation: Observation
    reward: float
    episode_done: bool
    life_lost: bool


class GridEnv:
    """Frame stacking, lives and episode bookkeeping shared by the games."""

    def __init__(self, config: EnvConfig, seed: int | None = None):
        self.config = config
        self.rng = np.random.default_rng(config.seed if seed is None else seed)
        self.lives = config.lives
        self.frames = np.zeros(config.obs_shape)
        self.steps = 0
        # age bookkeeping for the observation currently held
        self.episode_age = 0
        self.steps_since_life_loss = 0
        self.done = True

    @property
    def num_actions(self) -> int:
        return NUM_ACTIONS

    def reset(self) -> Observation:
        self.lives = self.config.lives
        self.steps = 0
        self.episode_age = 0
        self.steps_since_life_loss = 0
        self.done = False
        self._reset_world()
        frame = self._render()
        self.frames[...] = frame
        return self._observation()

    def step(self, action: int) -> StepResult:
        if self.done:
            raise EnvStateError("step() called on a finished episode; call reset()")
        if not 0 <= action < NUM_ACTIONS:
            raise ValueError(f"action must be in [0, {NUM_ACTIONS}), got {action}")
        reward, life_lost = self._advance(int(action))
        reward = float(np.clip(reward, -1.0, 1.0))
        self.steps += 1
        self.episode_age += 1
        if life_lost:
            self.lives -= 1
            self.steps_since_life_loss = 0
        else:
            self.steps_since_life_loss += 1
        self.done = self.lives <= 0 or self.steps >= self.config.max_episode_steps
        self.frames[:-1] = self.frames[1:]
        self.frames[-1] = self._render()
        return StepResult(self._observation(), reward, self.done, life_lost)

    def _observation(self) -> Observation:
        return Observation(self.frames.copy(), self.steps)

    def _reset_world(self):
        raise NotImplementedError

    def _advance(self, action: int) -> tuple[float, bool]:
        raise NotImplementedError

    def _render(self) -> np.ndarray:
        raise NotImplementedError


class Catch(GridEnv):
    """A ball drops one row per step onto a three-pixel paddle on the bottom
    row. Column overlap on arrival: +1. Otherwise -1 and a lost life. Either
    way a new ball spawns in a random column of the first row below the status
    strip and hangs there for one step before falling.

    ``paddle`` is the paddle's leftmost column.
    """

    PADDLE = 3

    def __init__(self, config: EnvConfig, seed: int | None = None):
        if config.height < HUD_ROWS + 2:
            raise ValueError(f"catch needs height >= {HUD_ROWS + 2}")
        super().__init__(config, seed)

    def _reset_world(self):
        self.paddle = (self.config.width - self.PADDLE) // 2
        self._spawn()

    def _spawn(self):
        self.ball_row = HUD_ROWS
        self.ball_col = int(self.rng.integers(self.config.width))
        self.hold = 1

    def covers(self, col: int) -> bool:
        return self.paddle <= col < self.paddle + self.PADDLE

    def _advance(self, action):
        self.paddle = min(max(self.paddle + action - 1, 0), self.config.width - self.PADDLE)
        if self.hold:
            self.hold -= 1
            return 0.0, False
        self.ball_row += 1
        if self.ball_row < self.config.height - 1:
            return 0.0, False
        caught = self.covers(self.ball_col)
        self._spawn()
        return (1.0, False) if caught else (-1.0, True)

    def _render(self):
        h = self.config.height
        frame = np.zeros(self.config.frame_shape)
        frame[self.ball_row, self.ball_col] = SPRITE
        frame[h - 1, self.paddle:self.paddle + self.PADDLE] = SPRITE
        return frame


class MiniBreakout(GridEnv):
    """Diagonal ball, three-pixel paddle on the bottom row, two brick rows
    just under the status strip. The ceiling is the strip's lower edge.
    Clearing every brick rebuilds the wall.
    """

    PADDLE = 3
    BRICK_ROWS = (HUD_ROWS + 1, HUD_ROWS + 2)

    def __init__(self, config: EnvConfig, seed: int | None = None):
        if config.height < self.BRICK_ROWS[-1] + 5:
            raise ValueError(f"mini_breakout needs height >= {self.BRICK_ROWS[-1] + 5}")
        super().__init__(config, seed)

    def _reset_world(self):
        w = self.config.width
        self.bricks = np.ones((len(self.BRICK_ROWS), w), dtype=bool)
        self.paddle = (w - self.PADDLE) // 2  # leftmost paddle column
        self._serve()

    def _serve(self):
        self.ball_row = self.BRICK_ROWS[-1] + 2
        self.ball_col = int(self.rng.integers(self.config.width))
        self.dr = 1
        self.dc = int(self.rng.choice((-1, 1)))

    def _brick_at(self, r, c):
        if r in self.BRICK_ROWS and self.bricks[r - self.BRICK_ROWS[0], c]:
            return True
        return False

    def _advance(self, action):
        h, w = self.config.frame_shape
        self.paddle = min(max(self.paddle + action - 1, 0), w - self.PADDLE)
        reward = 0.0
        nc = self.ball_col + self.dc
        if nc < 0 or nc >= w:
            self.dc = -self.dc
            nc = self.ball_col + self.dc
        nr = self.ball_row + self.dr
        if nr < HUD_ROWS:
            self.dr = 1
            nr = self.ball_row + 1
        if self._brick_at(nr, nc):
            self.bricks[nr - self.BRICK_ROWS[0], nc] = False
            reward = 1.0
            self.dr = -self.dr
            nr = self.ball_row
            if not self.bricks.any():
                self.bricks[...] = True
        if nr == h - 1:
            if self.paddle <= nc < self.paddle + self.PADDLE:
                self.dr = -1
                nr = self.ball_row
            else:
                self._serve()
                return -1.0, True
        self.ball_row, self.ball_col = nr, nc
        return reward, False

    def _render(self):
        h, w = self.config.frame_shape
        frame = np.zeros((h, w))
        for i, r in enumerate(self.BRICK_ROWS):
            frame[r, self.bricks[i]] = SPRITE
        frame[self.ball_row, self.ball_col] = SPRITE
        frame[h - 1, self.paddle:self.paddle + self.PADDLE] = SPRITE
        return frame


def make_env(config: EnvConfig, seed: int | None = None) -> GridEnv:
    cls = {"catch": Catch, "mini_breakout": MiniBreakout}[config.env_name]
    return cls(config, seed)


def worker_seed(base: int, index: int) -> int:
    """Independent, reproducible seed for the ``index``-th copy of an env."""
    return int(np.random.SeedSequence([base, index]).generate_state(1, dtype=np.uint64)[0])


def greedy_catch_action(env: Catch) -> int:
    """Move the paddle toward the ball's column."""
    if env.ball_col < env.paddle:
        return LEFT
    if env.ball_col >= env.paddle + env.PADDLE:
        return RIGHT
    return STAY


@dataclass
class RandomPolicySummary:
    mean_return: float
    mean_ttf_clean: float
    episodes: int


def run_random_policy(config: EnvConfig, episodes: int, seed: int = 0) -> RandomPolicySummary:
    """Uniform-random rollouts: mean episode return and mean states per life."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    returns, lifetimes = [], []
    for ep in range(episodes):
        env = make_env(config, worker_seed(config.seed, ep))
        env.reset()
        total, since = 0.0, 0
        while True:
            res = env.step(int(rng.integers(NUM_ACTIONS)))
            total += res.reward
            since += 1
            if res.life_lost:
                lifetimes.append(since)
                since = 0
            if res.episode_done:
                break
        returns.append(total)
    return RandomPolicySummary(float(np.mean(returns)), float(np.mean(lifetimes)) if lifetimes else float("nan"), episodes)


def save_pgm(frame: np.ndarray, path) -> Path:
    """Write one frame as a binary 8-bit PGM, pixel values scaled by 255."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ValueError("save_pgm expects a 2-D frame")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{frame.shape[1]} {frame.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + pixels.tobytes())
    return path


def dump_observation(obs: Observation, directory, prefix: str = "frame") -> list[Path]:
    return [save_pgm(f, Path(directory) / f"{prefix}_{i}.pgm") for i, f in enumerate(obs.frames)]


def with_episode_cap(config: EnvConfig, steps: int) -> EnvConfig:
    return replace(config, max_episode_steps=steps)
