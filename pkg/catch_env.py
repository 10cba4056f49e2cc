"""
Catch - Deterministic Pixel Environment

A ball falls one row per step from the top of a grid_h x grid_w board; the
agent moves a one-cell paddle along the bottom row (left / stay / right).
When the ball reaches the bottom row the episode ends with +1 if the paddle is
under it and -1 otherwise. The distractor variant adds falling objects that
never pay out, to check whether attention stays on what matters.

Rendering is grayscale in [0, 1], one cell_px x cell_px block per cell:
ball 1.0, paddle 0.6, distractor 0.8, background 0.

The observation wrapper repeats each action ``frameskip`` times (rewards
summed, last frame kept) and stacks the last ``framestack`` frames on the
channel axis, zero-padded at episode start.

Each environment instance is single-threaded; separate instances share nothing.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Deque, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from models import DEFAULT_DISTRACTORS, Action, EnvConfig, EnvError, EnvVariant

BALL_VALUE = 1.0
PADDLE_VALUE = 0.6
DISTRACTOR_VALUE = 0.8

# ============================================================================
# State and dynamics
# ============================================================================


@dataclass(frozen=True)
class CatchState:
    """
    Board state. Negative row/column values mean "not on the board".

    ``distractors`` holds (row, col) cells of the non-rewarding objects.
    """

    ball_row: int
    ball_col: int
    paddle_col: int
    distractors: Tuple[Tuple[int, int], ...] = ()
    t: int = 0
    terminal: bool = False

    @staticmethod
    def empty() -> "CatchState":
        return CatchState(ball_row=-1, ball_col=-1, paddle_col=-1)


def reset_state(cfg: EnvConfig, rng: np.random.Generator) -> CatchState:
    """
    Start an episode: ball on the start row in a uniformly random column,
    paddle bottom-centre, distractors scattered above the bottom row.

    The ball column is drawn first so plain and distractor boards built from
    the same seed share the ball.
    """
    ball_col = int(rng.integers(cfg.grid_w))
    distractors = tuple(
        (int(rng.integers(cfg.grid_h - 1)), int(rng.integers(cfg.grid_w)))
        for _ in range(cfg.distractors)
    )
    return CatchState(
        ball_row=cfg.grid_h - cfg.frames_per_episode,
        ball_col=ball_col,
        paddle_col=cfg.grid_w // 2,
        distractors=distractors,
    )


def step_state(
    state: CatchState, action: int, cfg: EnvConfig, rng: np.random.Generator
) -> Tuple[CatchState, float, bool]:
    """
    Advance one step.

    Returns:
        (next_state, reward, terminal); reward is non-zero only on the final row

    Raises:
        EnvError: stepping a finished episode or an unknown action
    """
    if state.terminal:
        raise EnvError("step() called on a terminal state; call reset() first")
    if action not in Action.DELTA:
        raise EnvError(f"unknown action {action!r}; expected one of {Action.ALL}")

    paddle = min(max(state.paddle_col + Action.DELTA[action], 0), cfg.grid_w - 1)
    ball_row = state.ball_row + 1

    distractors = []
    for row, col in state.distractors:
        row += 1
        if row >= cfg.grid_h - 1:
            row, col = 0, int(rng.integers(cfg.grid_w))
        distractors.append((row, col))

    terminal = ball_row >= cfg.grid_h - 1
    reward = 0.0
    if terminal:
        reward = 1.0 if paddle == state.ball_col else -1.0

    next_state = CatchState(
        ball_row=ball_row,
        ball_col=state.ball_col,
        paddle_col=paddle,
        distractors=tuple(distractors),
        t=state.t + 1,
        terminal=terminal,
    )
    return next_state, reward, terminal


def _paint(frame: np.ndarray, row: int, col: int, value: float, cell_px: int) -> None:
    if row < 0 or col < 0:
        return
    frame[row * cell_px : (row + 1) * cell_px, col * cell_px : (col + 1) * cell_px] = value


def render(state: CatchState, cfg: EnvConfig) -> np.ndarray:
    """Grayscale (H, W) frame; the ball is painted last so it is always visible."""
    frame = np.zeros((cfg.frame_height, cfg.frame_width))
    for row, col in state.distractors:
        _paint(frame, row, col, DISTRACTOR_VALUE, cfg.cell_px)
    if state.paddle_col >= 0:
        _paint(frame, cfg.grid_h - 1, state.paddle_col, PADDLE_VALUE, cfg.cell_px)
    _paint(frame, state.ball_row, state.ball_col, BALL_VALUE, cfg.cell_px)
    return frame


def object_cells(state: CatchState, cfg: EnvConfig) -> Dict[str, List[Tuple[int, int]]]:
    """Grid cells (row, col) occupied by each kind of object."""
    cells: Dict[str, List[Tuple[int, int]]] = {"ball": [], "paddle": [], "distractors": []}
    if state.ball_row >= 0 and state.ball_col >= 0:
        cells["ball"].append((state.ball_row, state.ball_col))
    if state.paddle_col >= 0:
        cells["paddle"].append((cfg.grid_h - 1, state.paddle_col))
    cells["distractors"] = [cell for cell in state.distractors if cell not in cells["ball"]]
    return cells


# ============================================================================
# Environment objects
# ============================================================================


class CatchEnv:
    """Stateful Catch board with its own seeded generator."""

    num_actions = len(Action.ALL)

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg.validate()
        self.rng = np.random.default_rng(cfg.seed)
        self.state: Optional[CatchState] = None

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = reset_state(self.cfg, self.rng)
        return render(self.state, self.cfg)

    def step(self, action: int) -> Tuple[np.ndarray, float, bool]:
        if self.state is None:
            raise EnvError("step() called before reset()")
        self.state, reward, terminal = step_state(self.state, action, self.cfg, self.rng)
        return render(self.state, self.cfg), reward, terminal


class FrameStack:
    """
    Frameskip + framestack wrapper.

    ``last_frames`` holds how many raw frames the latest step consumed (fewer
    than ``frameskip`` when the episode ends early).
    """

    def __init__(self, env: CatchEnv, frameskip: int = 4, framestack: int = 4):
        if frameskip < 1 or framestack < 1:
            raise EnvError(f"frameskip and framestack must be >= 1, got {frameskip}/{framestack}")
        self.env = env
        self.frameskip = frameskip
        self.framestack = framestack
        self.frames: Deque[np.ndarray] = deque(maxlen=framestack)
        self.last_frames = 0

    @property
    def cfg(self) -> EnvConfig:
        return self.env.cfg

    @property
    def state(self) -> Optional[CatchState]:
        return self.env.state

    @property
    def num_actions(self) -> int:
        return self.env.num_actions

    @property
    def observation_shape(self) -> Tuple[int, int, int]:
        return self.framestack, self.cfg.frame_height, self.cfg.frame_width

    def observation(self) -> np.ndarray:
        return np.stack(self.frames, axis=0)

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        frame = self.env.reset(seed)
        self.frames.clear()
        for _ in range(self.framestack - 1):
            self.frames.append(np.zeros_like(frame))
        self.frames.append(frame)
        self.last_frames = 0
        return self.observation()

    def step(self, action: int) -> Tuple[np.ndarray, float, bool]:
        total, terminal, frame = 0.0, False, None
        self.last_frames = 0
        for _ in range(self.frameskip):
            frame, reward, terminal = self.env.step(action)
            total += reward
            self.last_frames += 1
            if terminal:
                break
        self.frames.append(frame)
        return self.observation(), total, terminal


def wrap(env: CatchEnv, frameskip: int = 4, framestack: int = 4) -> FrameStack:
    return FrameStack(env, frameskip, framestack)


def variant_config(cfg: EnvConfig, variant: str) -> EnvConfig:
    """Plain keeps the config; distractor guarantees at least a few distractors."""
    if variant not in EnvVariant.ALL:
        raise EnvError(f"unknown env variant {variant!r}")
    if variant == EnvVariant.DISTRACTOR:
        return replace(cfg, distractors=max(cfg.distractors, DEFAULT_DISTRACTORS))
    return replace(cfg, distractors=0)


def make_env(cfg: EnvConfig, frameskip: int, framestack: int, seed: Optional[int] = None) -> FrameStack:
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return wrap(CatchEnv(cfg), frameskip, framestack)


# ============================================================================
# Trajectory dump
# ============================================================================


def write_trajectory_csv(path: Union[str, Path], rows: Iterable[Tuple[int, int, float, bool]]) -> Path:
    """Write (step, action, reward, terminal) rows with a header line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "action", "reward", "terminal"])
        for step, action, reward, terminal in rows:
            writer.writerow([step, action, f"{reward:g}", int(bool(terminal))])
    return path
