"""
Learning and interpretability acceptance runs on 40x40 Catch.

These train full desk-profile models and take tens of minutes; they only run
with ``pytest --runslow``.
"""

from pathlib import Path

import numpy as np
import pytest

from catch_env import make_env, variant_config
from config import load_run_config
from ife_net import init_params
from models import EnvVariant, Regime
from trainer import evaluate, train

DESK = Path(__file__).parent / "configs" / "catch_desk.json"
SEEDS = (0, 1, 2)

pytestmark = pytest.mark.slow


def _train(regime, seed):
    run = load_run_config(DESK, regime=regime, seed=seed)
    hp = run.train

    def env_factory(env_seed):
        return make_env(run.env, hp.frameskip, hp.framestack, seed=env_seed)

    result = train(env_factory, lambda s: init_params(run.model, s), hp, run.seed)
    return run, result


@pytest.fixture(scope="module")
def dqn_runs():
    return [_train(Regime.DQN, seed) for seed in SEEDS]


def test_value_regime_learns_catch(dqn_runs):
    for run, result in dqn_runs:
        assert result.stats.frames <= 200_000
    assert np.mean([result.stats.mean_return(100) for _, result in dqn_runs]) >= 0.9


def test_actor_critic_regime_learns_catch():
    runs = [_train(Regime.A2C, seed) for seed in SEEDS]
    for _, result in runs:
        assert result.stats.frames <= 300_000
    assert np.mean([result.stats.mean_return(100) for _, result in runs]) >= 0.8


def test_attention_concentrates_on_ball_and_paddle(dqn_runs):
    run, result = dqn_runs[0]
    env = make_env(run.env, run.train.frameskip, run.train.framestack)
    report = evaluate(result.params, env, 100, seed=1_000)
    assert report.uniform_baseline <= 0.06
    assert report.attention_concentration >= 0.5


def test_attention_transfers_to_distractor_catch(dqn_runs):
    run, result = dqn_runs[0]
    noisy = variant_config(run.env, EnvVariant.DISTRACTOR)
    env = make_env(noisy, run.train.frameskip, run.train.framestack)
    report = evaluate(result.params, env, 100, seed=2_000)
    assert report.attention_concentration >= 0.35
    assert report.attention_concentration >= 2 * report.distractor_share
