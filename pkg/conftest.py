"""
Shared pytest fixtures and the --runslow switch.
"""

import numpy as np
import pytest

from models import AfeConfig, CnnConfig, EnvConfig, HeadType, HueConfig, Hyperparams, ModelConfig, Regime


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# ============================================================================
# Configs
# ============================================================================


def tiny_model_config(head=HeadType.DUELING_Q, variant="ife", **changes) -> ModelConfig:
    """1x8x8 input, 2x2 feature grid, a few hundred parameters."""
    base = dict(
        variant=variant,
        head=head,
        in_channels=1,
        input_h=8,
        input_w=8,
        num_actions=3,
        head_hidden=0,
        hue=HueConfig(layers=((2, 2), (2, 2)), channels=(2, 3), attention_dim=4),
        cnn=CnnConfig(layers=((3, 1), (2, 2)), channels=(2, 3)),
        afe=AfeConfig(pool_kernel=1, pool_stride=1, blocks=1, width=3, adaptive_hw=(1, 1)),
    )
    base.update(changes)
    return ModelConfig(**base)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def small_env_config():
    """5x5 board, 2px cells -> 10x10 frames."""
    return EnvConfig(grid_w=5, grid_h=5, cell_px=2)


@pytest.fixture
def small_model_config():
    """Matches small_env_config with framestack 2."""
    return ModelConfig(
        in_channels=2,
        input_h=10,
        input_w=10,
        head_hidden=8,
        hue=HueConfig(layers=((2, 2),), channels=(4,), attention_dim=8),
        afe=AfeConfig(pool_kernel=1, pool_stride=1, blocks=1, width=4, adaptive_hw=(2, 2)),
    )


@pytest.fixture
def dqn_hp():
    return Hyperparams(
        regime=Regime.DQN,
        total_frames=300,
        learning_starts=40,
        batch_size=8,
        replay_capacity=100,
        target_update_frames=50,
        eps_decay_frames=200,
        update_every=2,
        framestack=2,
        checkpoint_every=150,
    )


@pytest.fixture
def a2c_hp():
    return Hyperparams(
        regime=Regime.A2C,
        n_step=5,
        num_envs=2,
        lr=0.0001,
        amsgrad=True,
        total_frames=200,
        framestack=2,
        checkpoint_every=100,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
