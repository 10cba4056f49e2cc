"""
Tests for the Catch environment and its observation wrapper.
"""

import csv

import numpy as np
import pytest

from catch_env import (
    BALL_VALUE,
    DISTRACTOR_VALUE,
    PADDLE_VALUE,
    CatchEnv,
    CatchState,
    FrameStack,
    make_env,
    object_cells,
    render,
    reset_state,
    step_state,
    variant_config,
    write_trajectory_csv,
)
from models import Action, ConfigError, EnvConfig, EnvError, EnvVariant


def ball_cell(frame, cfg):
    rows, cols = np.nonzero(frame == BALL_VALUE)
    return int(rows[0]) // cfg.cell_px, int(cols[0]) // cfg.cell_px


def chase(state):
    if state.paddle_col < state.ball_col:
        return Action.RIGHT
    if state.paddle_col > state.ball_col:
        return Action.LEFT
    return Action.STAY


# ============================================================================
# Dynamics
# ============================================================================


def test_reset_is_deterministic_per_seed():
    env = CatchEnv(EnvConfig())
    first = env.reset(seed=11)
    actions = [Action.LEFT, Action.RIGHT, Action.STAY, Action.RIGHT]
    trace = [env.step(a) for a in actions]
    again = env.reset(seed=11)
    np.testing.assert_array_equal(first, again)
    for a, (frame, reward, terminal) in zip(actions, trace):
        frame2, reward2, terminal2 = env.step(a)
        np.testing.assert_array_equal(frame, frame2)
        assert (reward, terminal) == (reward2, terminal2)


def test_initial_layout():
    cfg = EnvConfig()
    env = CatchEnv(cfg)
    frame = env.reset(seed=3)
    assert frame.shape == (40, 40)
    assert env.state.ball_row == 0
    assert env.state.paddle_col == 5
    assert np.all(frame[36:40, 20:24] == PADDLE_VALUE)
    assert ball_cell(frame, cfg) == (0, env.state.ball_col)


def test_ball_column_is_uniform():
    env = CatchEnv(EnvConfig())
    counts = np.zeros(10)
    for seed in range(10_000):
        env.reset(seed=seed)
        counts[env.state.ball_col] += 1
    expected = 1_000.0
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    assert chi2 < 21.666


def test_ball_falls_one_row_per_step_and_episode_length():
    cfg = EnvConfig()
    env = CatchEnv(cfg)
    env.reset(seed=0)
    rewards = []
    for step in range(1, 10):
        frame, reward, terminal = env.step(Action.STAY)
        rewards.append(reward)
        assert ball_cell(frame, cfg)[0] == step
        assert terminal == (step == 9)
    assert all(r == 0.0 for r in rewards[:-1])
    assert rewards[-1] in (1.0, -1.0)


def test_short_episode_starts_lower():
    cfg = EnvConfig(episode_len=4)
    env = CatchEnv(cfg)
    env.reset(seed=0)
    assert env.state.ball_row == 6
    steps = 0
    terminal = False
    while not terminal:
        _, _, terminal = env.step(Action.STAY)
        steps += 1
    assert steps == 3


def test_reward_catch_and_miss():
    cfg = EnvConfig()
    rng = np.random.default_rng(0)
    state = CatchState(ball_row=8, ball_col=4, paddle_col=5)
    _, reward, terminal = step_state(state, Action.LEFT, cfg, rng)
    assert terminal and reward == 1.0
    _, reward, terminal = step_state(state, Action.RIGHT, cfg, rng)
    assert terminal and reward == -1.0


def test_paddle_clamped_at_edges():
    cfg = EnvConfig()
    rng = np.random.default_rng(0)
    state = CatchState(ball_row=0, ball_col=3, paddle_col=0)
    assert step_state(state, Action.LEFT, cfg, rng)[0].paddle_col == 0
    state = CatchState(ball_row=0, ball_col=3, paddle_col=9)
    assert step_state(state, Action.RIGHT, cfg, rng)[0].paddle_col == 9


@pytest.mark.parametrize("column", range(10))
def test_chasing_policy_always_catches(column):
    cfg = EnvConfig()
    rng = np.random.default_rng(0)
    state = CatchState(ball_row=0, ball_col=column, paddle_col=cfg.grid_w // 2)
    total, terminal = 0.0, False
    while not terminal:
        state, reward, terminal = step_state(state, chase(state), cfg, rng)
        total += reward
    assert total == 1.0


def test_random_policy_mean_return():
    env = CatchEnv(EnvConfig())
    rng = np.random.default_rng(99)
    returns = []
    for seed in range(10_000):
        env.reset(seed=seed)
        terminal, total = False, 0.0
        while not terminal:
            _, reward, terminal = env.step(int(rng.integers(3)))
            total += reward
        returns.append(total)
    assert abs(np.mean(returns) - (2 / 10 - 1)) <= 0.05


def test_step_errors():
    env = CatchEnv(EnvConfig())
    with pytest.raises(EnvError):
        env.step(Action.STAY)
    env.reset(seed=0)
    with pytest.raises(EnvError):
        env.step(7)
    terminal = False
    while not terminal:
        _, _, terminal = env.step(Action.STAY)
    with pytest.raises(EnvError):
        env.step(Action.STAY)


def test_invalid_config():
    with pytest.raises(ConfigError):
        CatchEnv(EnvConfig(grid_h=1))
    with pytest.raises(ConfigError):
        CatchEnv(EnvConfig(episode_len=11))


# ============================================================================
# Rendering and distractors
# ============================================================================


def test_render_cells_and_values():
    cfg = EnvConfig(grid_w=4, grid_h=3, cell_px=2)
    state = CatchState(ball_row=1, ball_col=2, paddle_col=0, distractors=((0, 3),))
    frame = render(state, cfg)
    assert frame.shape == (6, 8)
    assert np.all(frame[2:4, 4:6] == BALL_VALUE)
    assert np.all(frame[4:6, 0:2] == PADDLE_VALUE)
    assert np.all(frame[0:2, 6:8] == DISTRACTOR_VALUE)
    assert np.count_nonzero(frame) == 12
    assert frame.min() >= 0.0 and frame.max() <= 1.0


def test_ball_painted_over_distractor():
    cfg = EnvConfig(grid_w=4, grid_h=3, cell_px=1)
    state = CatchState(ball_row=0, ball_col=1, paddle_col=0, distractors=((0, 1),))
    assert render(state, cfg)[0, 1] == BALL_VALUE
    assert object_cells(state, cfg)["distractors"] == []


def test_distractor_board_differs_only_at_distractor_cells():
    plain_cfg = EnvConfig()
    distract_cfg = variant_config(plain_cfg, EnvVariant.DISTRACTOR)
    assert distract_cfg.distractors == 3
    for seed in range(20):
        plain = CatchEnv(plain_cfg)
        noisy = CatchEnv(distract_cfg)
        a, b = plain.reset(seed=seed), noisy.reset(seed=seed)
        for _ in range(5):
            diff = a != b
            allowed = np.zeros_like(diff)
            for row, col in object_cells(noisy.state, distract_cfg)["distractors"]:
                allowed[row * 4 : (row + 1) * 4, col * 4 : (col + 1) * 4] = True
            assert not np.any(diff & ~allowed)
            assert plain.state.ball_col == noisy.state.ball_col
            a, _, _ = plain.step(Action.LEFT)
            b, _, _ = noisy.step(Action.LEFT)


def test_distractors_never_reach_bottom_row():
    cfg = EnvConfig(distractors=4)
    env = CatchEnv(cfg)
    env.reset(seed=5)
    terminal = False
    while not terminal:
        assert all(row < cfg.grid_h - 1 for row, _ in env.state.distractors)
        _, reward, terminal = env.step(Action.STAY)


def test_variant_config_rejects_unknown():
    assert variant_config(EnvConfig(distractors=2), EnvVariant.PLAIN).distractors == 0
    with pytest.raises(EnvError):
        variant_config(EnvConfig(), "stormy")


# ============================================================================
# FrameStack wrapper
# ============================================================================


def test_wrapper_with_unit_skip_and_stack_is_identity():
    raw = CatchEnv(EnvConfig())
    wrapped = FrameStack(CatchEnv(EnvConfig()), frameskip=1, framestack=1)
    a, b = raw.reset(seed=4), wrapped.reset(seed=4)
    np.testing.assert_array_equal(b[0], a)
    for action in (Action.LEFT, Action.LEFT, Action.STAY):
        fa, ra, ta = raw.step(action)
        fb, rb, tb = wrapped.step(action)
        np.testing.assert_array_equal(fb[0], fa)
        assert (ra, ta) == (rb, tb)


def test_wrapper_zero_pads_then_stacks_distinct_rows():
    cfg = EnvConfig()
    env = make_env(cfg, frameskip=1, framestack=4, seed=2)
    obs = env.reset()
    assert obs.shape == env.observation_shape == (4, 40, 40)
    assert not np.any(obs[:3])
    for _ in range(3):
        obs, _, _ = env.step(Action.STAY)
    rows = [ball_cell(obs[i], cfg)[0] for i in range(4)]
    assert rows == [0, 1, 2, 3]


def test_frameskip_sums_rewards_and_stops_at_terminal():
    cfg = EnvConfig(episode_len=4)
    env = make_env(cfg, frameskip=2, framestack=1, seed=0)
    env.reset()
    _, reward, terminal = env.step(Action.STAY)
    assert (reward, terminal, env.last_frames) == (0.0, False, 2)
    _, reward, terminal = env.step(Action.STAY)
    assert terminal and reward in (1.0, -1.0)
    assert env.last_frames == 1


def test_wrapper_rejects_bad_sizes():
    with pytest.raises(EnvError):
        FrameStack(CatchEnv(EnvConfig()), frameskip=0)


# ============================================================================
# Trajectory dump
# ============================================================================


def test_write_trajectory_csv(tmp_path):
    path = write_trajectory_csv(tmp_path / "traj" / "ep.csv", [(0, 1, 0.0, False), (1, 2, -1.0, True)])
    with path.open() as handle:
        rows = list(csv.reader(handle))
    assert rows == [["step", "action", "reward", "terminal"], ["0", "1", "0", "0"], ["1", "2", "-1", "1"]]


def test_reset_state_keeps_distractors_off_bottom_row(small_env_config):
    cfg = EnvConfig(grid_w=5, grid_h=5, cell_px=2, distractors=6)
    rng = np.random.default_rng(0)
    for _ in range(50):
        state = reset_state(cfg, rng)
        assert all(0 <= row < 4 and 0 <= col < 5 for row, col in state.distractors)
    assert small_env_config.frame_height == 10
