"""
Trainer - Value and Actor-Critic Regimes

Two regimes drive the feature extractor end to end on Catch:

1. Value regime: n-step double DQN with a dueling head, uniform replay,
   Huber loss, hard target syncs and linear epsilon decay
2. Actor-critic regime: synchronous advantage actor-critic over k envs with
   GAE advantages, entropy bonus and AMSGrad

Both share the same loop plumbing: seeded streams split from one
``numpy.random.SeedSequence`` (env, init, replay sampling, exploration), a CSV
stats stream (frame, episode, return, loss, epsilon, attention_entropy), a
progress line every 1,000 frames, periodic "IFE1" checkpoints, and an abort
with a JSON diagnostic dump when the loss turns NaN.

``evaluate`` runs a greedy policy and measures how much attention lands on the
ball and paddle (attention concentration) versus distractors.

The loop is the only writer of the parameters; forward passes for acting run
outside any tape on the current parameters.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Deque, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from catch_env import CatchState, FrameStack, object_cells
from checkpoint import save_checkpoint
from ife_net import ModelParams, forward
from models import (
    AttentionMask,
    ConfigError,
    ConvStackSpec,
    HeadType,
    Hyperparams,
    ModelConfig,
    Regime,
    ReplayError,
    TrainingDivergedError,
    Transition,
)
from spatial_audit import receptive_field
from tensor_core import (
    Adam,
    Tape,
    Tensor,
    global_norm,
    grad_clip_norm,
    huber_loss,
    log_softmax,
    mean,
    mse_loss,
    mul,
    scale,
    select,
    softmax,
    tsum,
)

logger = logging.getLogger(__name__)

PROGRESS_EVERY = 1_000
STATS_HEADER = ["frame", "episode", "return", "loss", "epsilon", "attention_entropy"]

EnvFactory = Callable[[int], FrameStack]
ModelFactory = Callable[[int], ModelParams]
ProgressCallback = Callable[[str], None]

# ============================================================================
# Exploration and returns
# ============================================================================


def epsilon(frame: int, hp: Hyperparams) -> float:
    """Linear decay from eps_start to eps_end over eps_decay_frames, then flat."""
    if frame >= hp.eps_decay_frames:
        return hp.eps_end
    fraction = max(frame, 0) / hp.eps_decay_frames
    return hp.eps_start + fraction * (hp.eps_end - hp.eps_start)


def _check_contiguous(transitions: Sequence[Transition]) -> None:
    for k in range(len(transitions) - 1):
        if not np.array_equal(transitions[k].next_obs, transitions[k + 1].obs):
            raise ReplayError(f"n-step window is not contiguous between steps {k} and {k + 1}")


def nstep_target(transitions: Sequence[Transition], q_next: float, hp: Hyperparams) -> float:
    """
    G = sum_k gamma^k r_k + gamma^n q_next, cut at the first terminal.

    ``n`` is the window length; ``q_next`` is ignored when the window
    contains a terminal.

    Raises:
        ReplayError: empty or non-contiguous window
    """
    if not transitions:
        raise ReplayError("n-step window is empty")
    _check_contiguous(transitions)
    total, discount = 0.0, 1.0
    for t in transitions:
        total += discount * t.reward
        discount *= hp.gamma
        if t.terminal:
            return total
    return total + discount * q_next


def gae_advantages(deltas: Sequence[float], hp: Hyperparams, dones: Optional[Sequence[bool]] = None) -> np.ndarray:
    """
    A_t = delta_t + gamma * lambda * A_{t+1}, computed backwards.

    ``dones[t]`` marks a transition that ended its episode; nothing flows back
    across it.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    cut = np.zeros(len(deltas), dtype=bool) if dones is None else np.asarray(dones, dtype=bool)
    advantages = np.zeros_like(deltas)
    running = 0.0
    decay = hp.gamma * hp.gae_lambda
    for t in range(len(deltas) - 1, -1, -1):
        running = deltas[t] + (0.0 if cut[t] else decay * running)
        advantages[t] = running
    return advantages


# ============================================================================
# Replay
# ============================================================================


@dataclass
class ReplayBatch:
    obs: np.ndarray
    actions: np.ndarray
    returns: np.ndarray
    discounts: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return int(self.actions.shape[0])


def _quantize(obs: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(obs, 0.0, 1.0) * 255.0).astype(np.uint8)


class ReplayBuffer:
    """
    Fixed-capacity ring of n-step transitions with a seeded uniform sampler.

    Observations are stored as 8-bit intensities.
    """

    def __init__(self, capacity: int, obs_shape: Tuple[int, ...], seed: int = 0):
        if capacity < 1:
            raise ReplayError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.obs = np.zeros((capacity,) + tuple(obs_shape), dtype=np.uint8)
        self.next_obs = np.zeros_like(self.obs)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.returns = np.zeros(capacity)
        self.discounts = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.rng = np.random.default_rng(seed)
        self.size = 0
        self.pos = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action: int, ret: float, next_obs, done: bool, discount: float) -> None:
        i = self.pos
        self.obs[i] = _quantize(obs)
        self.next_obs[i] = _quantize(next_obs)
        self.actions[i] = action
        self.returns[i] = ret
        self.discounts[i] = discount
        self.dones[i] = done
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if batch_size < 1:
            raise ReplayError(f"batch size must be positive, got {batch_size}")
        if self.size < batch_size:
            raise ReplayError(f"buffer holds {self.size} transitions, need {batch_size} to sample")
        return self.rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int) -> ReplayBatch:
        idx = self.sample_indices(batch_size)
        return ReplayBatch(
            obs=self.obs[idx] / 255.0,
            actions=self.actions[idx].copy(),
            returns=self.returns[idx].copy(),
            discounts=self.discounts[idx].copy(),
            next_obs=self.next_obs[idx] / 255.0,
            dones=self.dones[idx].copy(),
        )


class NStepAccumulator:
    """
    Sliding window turning one-step transitions into n-step ones.

    ``push`` returns finished records shaped like ``ReplayBuffer.add``
    arguments: (obs, action, n-step reward sum, obs after k steps, done,
    gamma^k). At a terminal the whole window is flushed.
    """

    def __init__(self, hp: Hyperparams):
        self.hp = hp
        self.window: Deque[Transition] = deque()

    def _emit(self) -> Tuple[np.ndarray, int, float, np.ndarray, bool, float]:
        items = list(self.window)
        ret = nstep_target(items, 0.0, self.hp)
        first, last = items[0], items[-1]
        return first.obs, first.action, ret, last.next_obs, last.terminal, self.hp.gamma ** len(items)

    def push(self, transition: Transition) -> List[Tuple[np.ndarray, int, float, np.ndarray, bool, float]]:
        self.window.append(transition)
        out = []
        if transition.terminal:
            while self.window:
                out.append(self._emit())
                self.window.popleft()
        elif len(self.window) == self.hp.n_step:
            out.append(self._emit())
            self.window.popleft()
        return out

    def clear(self) -> None:
        self.window.clear()


# ============================================================================
# Value regime
# ============================================================================


class DqnResult(NamedTuple):
    loss: float
    grad_norm: float
    online: ModelParams


def make_optimizer(params: ModelParams, hp: Hyperparams) -> Adam:
    return Adam(params.tensors, lr=hp.lr, eps=hp.effective_adam_eps, amsgrad=hp.amsgrad)


def _clip(grads: Dict[str, Optional[np.ndarray]], hp: Hyperparams) -> Tuple[Dict, float]:
    norm = global_norm(grads.values())
    if hp.grad_clip > 0:
        grads = grad_clip_norm(grads, hp.grad_clip)
    return grads, norm


def double_q_targets(batch: ReplayBatch, online: ModelParams, target: ModelParams) -> np.ndarray:
    """R + discount * (1 - done) * Q_target(s', argmax_a Q_online(s', a))."""
    rows = np.arange(len(batch))
    best = np.argmax(forward(online, batch.next_obs).q.data, axis=1)
    bootstrap = forward(target, batch.next_obs).q.data[rows, best]
    return batch.returns + batch.discounts * (1.0 - batch.dones) * bootstrap


def dqn_update(
    batch: ReplayBatch,
    online: ModelParams,
    target: ModelParams,
    hp: Hyperparams,
    optimizer: Optional[Adam] = None,
) -> DqnResult:
    """
    One double-DQN step: Huber loss on n-step targets, clip, Adam.

    The target parameters are only read.

    Raises:
        ReplayError: empty batch
    """
    if len(batch) == 0:
        raise ReplayError("dqn_update received an empty batch")
    optimizer = optimizer or make_optimizer(online, hp)
    targets = double_q_targets(batch, online, target)

    online.zero_grad()
    with Tape() as tape:
        q = forward(online, batch.obs).q
        loss = huber_loss(select(q, batch.actions), targets)
    tape.backward(loss)
    grads, norm = _clip(online.grads(), hp)
    optimizer.step(grads)
    return DqnResult(loss.item(), norm, online)


def target_sync(
    online: ModelParams,
    target: ModelParams,
    frame: int,
    hp: Hyperparams,
    previous_frame: Optional[int] = None,
) -> bool:
    """
    Hard-copy online into target when ``frame`` is a multiple of
    target_update_frames, or, given ``previous_frame``, when a multiple lies in
    (previous_frame, frame]. Returns True when a copy happened.
    """
    period = hp.target_update_frames
    if previous_frame is None:
        due = frame > 0 and frame % period == 0
    else:
        due = frame // period > previous_frame // period
    if due:
        target.load_from(online)
        logger.debug("target network synced at frame %d", frame)
    return due


# ============================================================================
# Actor-critic regime
# ============================================================================


@dataclass
class Rollout:
    """
    T steps from k envs collected in lock step.

    obs: (T, k, C, H, W); actions / rewards / dones: (T, k);
    last_obs: (k, C, H, W) observation after the final step.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    last_obs: np.ndarray


class A2CResult(NamedTuple):
    policy_loss: float
    value_loss: float
    entropy: float
    total: float
    grad_norm: float
    params: ModelParams


class A2CLosses(NamedTuple):
    policy: Tensor
    value: Tensor
    entropy: Tensor
    total: Tensor


def policy_entropy(logits: Tensor) -> Tensor:
    """Mean entropy of the categorical policies in ``logits`` (N, A)."""
    logp = log_softmax(logits, axis=-1)
    per_row = tsum(mul(softmax(logits, axis=-1), logp), axis=-1)
    return scale(mean(per_row), -1.0)


def a2c_losses(
    logits: Tensor,
    values: Tensor,
    actions: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    hp: Hyperparams,
) -> A2CLosses:
    """
    policy = -mean(log pi(a|s) * A), value = mean((R - V)^2),
    total = policy + value_coef * value - entropy_coef * entropy.

    Advantages and returns are constants.
    """
    logp = select(log_softmax(logits, axis=-1), actions)
    policy = scale(mean(mul(logp, advantages)), -1.0)
    value = mse_loss(values, returns)
    entropy = policy_entropy(logits)
    total = policy + scale(value, hp.value_coef) - scale(entropy, hp.entropy_coef)
    return A2CLosses(policy, value, entropy, total)


def rollout_advantages(
    rollout: Rollout, values: np.ndarray, last_values: np.ndarray, hp: Hyperparams
) -> Tuple[np.ndarray, np.ndarray]:
    """
    GAE advantages and value targets for a (T, k) rollout.

    Returns:
        (advantages, returns), both (T, k), with returns = advantages + V
    """
    next_values = np.concatenate([values[1:], last_values[None]], axis=0)
    not_done = 1.0 - rollout.dones.astype(np.float64)
    deltas = rollout.rewards + hp.gamma * next_values * not_done - values
    advantages = np.stack(
        [gae_advantages(deltas[:, j], hp, rollout.dones[:, j]) for j in range(deltas.shape[1])], axis=1
    )
    return advantages, advantages + values


def a2c_update(
    rollout: Rollout, params: ModelParams, hp: Hyperparams, optimizer: Optional[Adam] = None
) -> A2CResult:
    """Policy-gradient + value + entropy step over a whole rollout."""
    steps, envs = rollout.actions.shape
    optimizer = optimizer or make_optimizer(params, hp)
    flat_obs = rollout.obs.reshape((steps * envs,) + rollout.obs.shape[2:])
    last_values = forward(params, rollout.last_obs).value.data

    params.zero_grad()
    with Tape() as tape:
        result = forward(params, flat_obs)
        values = result.value.data.reshape(steps, envs)
        advantages, returns = rollout_advantages(rollout, values, last_values, hp)
        losses = a2c_losses(
            result.logits,
            result.value,
            rollout.actions.reshape(-1),
            advantages.reshape(-1),
            returns.reshape(-1),
            hp,
        )
    tape.backward(losses.total)
    grads, norm = _clip(params.grads(), hp)
    optimizer.step(grads)
    return A2CResult(
        losses.policy.item(), losses.value.item(), losses.entropy.item(), losses.total.item(), norm, params
    )


def sample_actions(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one action per row of (N, A) logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random(len(probs))[:, None]
    return np.minimum((u > np.cumsum(probs, axis=1)).sum(axis=1), logits.shape[1] - 1)


# ============================================================================
# Stats
# ============================================================================


@dataclass
class EpisodeRecord:
    frame: int
    episode: int
    ret: float
    loss: float
    epsilon: float
    attention_entropy: float

    def row(self) -> List[str]:
        return [
            str(self.frame),
            str(self.episode),
            f"{self.ret:g}",
            f"{self.loss:.6f}",
            f"{self.epsilon:.6f}",
            f"{self.attention_entropy:.6f}",
        ]


@dataclass
class TrainStats:
    regime: str
    episodes: List[EpisodeRecord] = field(default_factory=list)
    frames: int = 0
    updates: int = 0
    syncs: int = 0

    def mean_return(self, last: int = 100) -> float:
        if not self.episodes:
            return float("nan")
        return float(np.mean([e.ret for e in self.episodes[-last:]]))


class StatsWriter:
    """Streams episode rows to CSV as they arrive (no-op without a path)."""

    def __init__(self, path: Optional[Path]):
        self.handle = None
        self.writer = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.handle = path.open("w", newline="")
            self.writer = csv.writer(self.handle)
            self.writer.writerow(STATS_HEADER)

    def write(self, record: EpisodeRecord) -> None:
        if self.writer is not None:
            self.writer.writerow(record.row())
            self.handle.flush()

    def close(self) -> None:
        if self.handle is not None:
            self.handle.close()


@dataclass
class TrainResult:
    stats: TrainStats
    params: ModelParams
    checkpoint_path: Optional[Path] = None


@dataclass
class _Streams:
    env_seeds: List[int]
    init_seed: int
    sample_seed: int
    act_rng: np.random.Generator


def _split_seed(seed: int, num_envs: int) -> _Streams:
    env_ss, init_ss, sample_ss, act_ss = np.random.SeedSequence(seed).spawn(4)
    return _Streams(
        env_seeds=[int(s.generate_state(1)[0]) for s in env_ss.spawn(num_envs)],
        init_seed=int(init_ss.generate_state(1)[0]),
        sample_seed=int(sample_ss.generate_state(1)[0]),
        act_rng=np.random.default_rng(act_ss),
    )


class _LoopContext:
    """Progress lines, periodic checkpoints and NaN handling shared by both regimes."""

    def __init__(
        self,
        params: ModelParams,
        hp: Hyperparams,
        stats: TrainStats,
        out_dir: Optional[Path],
        progress: Optional[ProgressCallback],
        extra: Dict,
    ):
        self.params = params
        self.hp = hp
        self.stats = stats
        self.out_dir = out_dir
        self.progress = progress
        self.extra = extra
        self.writer = StatsWriter(out_dir / "stats.csv" if out_dir else None)
        self.last_loss = float("nan")

    def record_episode(self, frame: int, ret: float, eps: float, entropies: List[float]) -> None:
        record = EpisodeRecord(
            frame=frame,
            episode=len(self.stats.episodes) + 1,
            ret=ret,
            loss=self.last_loss,
            epsilon=eps,
            attention_entropy=float(np.mean(entropies)) if entropies else float("nan"),
        )
        self.stats.episodes.append(record)
        self.writer.write(record)

    def check_loss(self, loss: float, frame: int) -> None:
        self.last_loss = loss
        if math.isfinite(loss):
            return
        dump = None
        if self.out_dir is not None:
            dump = self.out_dir / "diverged.json"
            dump.parent.mkdir(parents=True, exist_ok=True)
            dump.write_text(
                json.dumps(
                    {
                        "frame": frame,
                        "episodes": len(self.stats.episodes),
                        "updates": self.stats.updates,
                        "loss": str(loss),
                        "param_norms": {k: float(np.linalg.norm(t.data)) for k, t in self.params.items()},
                        "grad_norms": {
                            k: (None if t.grad is None else float(np.linalg.norm(t.grad)))
                            for k, t in self.params.items()
                        },
                        "hyperparams": asdict(self.hp),
                    },
                    indent=2,
                    sort_keys=True,
                )
            )
        logger.error("loss became %s at frame %d; diagnostic dump: %s", loss, frame, dump)
        raise TrainingDivergedError(f"loss became {loss} at frame {frame}", str(dump) if dump else None)

    def tick(self, previous: int, frame: int, eps: float) -> None:
        self.stats.frames = frame
        if self.progress is not None:
            for mark in range(previous // PROGRESS_EVERY + 1, frame // PROGRESS_EVERY + 1):
                self.progress(
                    f"frame {mark * PROGRESS_EVERY:>9,} | episodes {len(self.stats.episodes):>6} | "
                    f"return(100) {self.stats.mean_return():+.3f} | loss {self.last_loss:.4f} | "
                    f"eps {eps:.3f}"
                )
        if self.out_dir is not None:
            every = self.hp.checkpoint_every
            for mark in range(previous // every + 1, frame // every + 1):
                self.save(self.out_dir / "checkpoints" / f"frame_{mark * every:09d}.ife", mark * every)

    def save(self, path: Path, frame: int) -> Path:
        return save_checkpoint(path, self.params, dict(self.extra, frame=frame))

    def close(self) -> None:
        self.writer.close()


# ============================================================================
# Training loops
# ============================================================================


def _train_dqn(envs: List[FrameStack], online: ModelParams, hp: Hyperparams, streams: _Streams, ctx: _LoopContext):
    env = envs[0]
    target = online.copy()
    optimizer = make_optimizer(online, hp)
    buffer = ReplayBuffer(hp.replay_capacity, env.observation_shape, streams.sample_seed)
    accumulator = NStepAccumulator(hp)
    num_actions = online.config.num_actions

    obs = env.reset(streams.env_seeds[0])
    frame, agent_steps, ep_return = 0, 0, 0.0
    entropies: List[float] = []
    eps = hp.eps_start
    while frame < hp.total_frames:
        eps = epsilon(frame, hp)
        result = forward(online, obs)
        entropies.append(result.mask.entropy())
        if streams.act_rng.random() < eps:
            action = int(streams.act_rng.integers(num_actions))
        else:
            action = int(np.argmax(result.q.data))

        next_obs, reward, terminal = env.step(action)
        previous, frame = frame, frame + env.last_frames
        agent_steps += 1
        ep_return += reward
        for record in accumulator.push(Transition(obs, action, reward, next_obs, terminal)):
            buffer.add(*record)

        if frame >= hp.learning_starts and agent_steps % hp.update_every == 0 and len(buffer) >= hp.batch_size:
            update = dqn_update(buffer.sample(hp.batch_size), online, target, hp, optimizer)
            ctx.stats.updates += 1
            ctx.check_loss(update.loss, frame)
        if target_sync(online, target, frame, hp, previous_frame=previous):
            ctx.stats.syncs += 1

        if terminal:
            ctx.record_episode(frame, ep_return, eps, entropies)
            ep_return, entropies = 0.0, []
            accumulator.clear()
            obs = env.reset()
        else:
            obs = next_obs
        ctx.tick(previous, frame, eps)


def _train_a2c(envs: List[FrameStack], params: ModelParams, hp: Hyperparams, streams: _Streams, ctx: _LoopContext):
    optimizer = make_optimizer(params, hp)
    obs = np.stack([env.reset(seed) for env, seed in zip(envs, streams.env_seeds)])
    returns = np.zeros(len(envs))
    entropies: List[List[float]] = [[] for _ in envs]
    frame = 0
    while frame < hp.total_frames:
        obs_buf, act_buf, rew_buf, done_buf = [], [], [], []
        previous = frame
        for _ in range(hp.n_step):
            result = forward(params, obs)
            for j in range(len(envs)):
                entropies[j].append(result.mask[j].entropy())
            actions = sample_actions(result.logits.data, streams.act_rng)

            next_obs = np.empty_like(obs)
            rewards = np.zeros(len(envs))
            dones = np.zeros(len(envs), dtype=bool)
            for j, env in enumerate(envs):
                step_obs, rewards[j], dones[j] = env.step(int(actions[j]))
                frame += env.last_frames
                returns[j] += rewards[j]
                if dones[j]:
                    ctx.record_episode(frame, returns[j], 0.0, entropies[j])
                    returns[j], entropies[j] = 0.0, []
                    step_obs = env.reset()
                next_obs[j] = step_obs
            obs_buf.append(obs)
            act_buf.append(actions)
            rew_buf.append(rewards)
            done_buf.append(dones)
            obs = next_obs

        rollout = Rollout(
            obs=np.stack(obs_buf),
            actions=np.stack(act_buf),
            rewards=np.stack(rew_buf),
            dones=np.stack(done_buf),
            last_obs=obs,
        )
        update = a2c_update(rollout, params, hp, optimizer)
        ctx.stats.updates += 1
        ctx.check_loss(update.total, frame)
        ctx.tick(previous, frame, 0.0)


def train(
    env_factory: EnvFactory,
    model_factory: ModelFactory,
    hp: Hyperparams,
    seed: int,
    out_dir: Optional[Union[str, Path]] = None,
    progress: Optional[ProgressCallback] = None,
    checkpoint_extra: Optional[Dict] = None,
) -> TrainResult:
    """
    Run the configured regime for ``hp.total_frames`` frames.

    Args:
        env_factory: seed -> wrapped environment
        model_factory: init seed -> fresh parameters (head must match the regime)
        hp: validated hyperparameters
        seed: master seed; env, init, sampling and exploration streams are
            derived from it
        out_dir: where stats.csv, periodic checkpoints and final.ife go
        progress: receives one line per 1,000 frames
        checkpoint_extra: extra header fields stored with every checkpoint

    Raises:
        TrainingDivergedError: the loss became NaN (dump written to out_dir)
    """
    hp.validate()
    num_envs = hp.num_envs if hp.regime == Regime.A2C else 1
    streams = _split_seed(seed, num_envs)
    params = model_factory(streams.init_seed)
    expected_head = HeadType.for_regime(hp.regime)
    if params.config.head != expected_head:
        raise ConfigError(f"regime {hp.regime} needs a {expected_head} head, got {params.config.head}")
    envs = [env_factory(s) for s in streams.env_seeds]

    out = Path(out_dir) if out_dir is not None else None
    extra = dict(checkpoint_extra or {}, seed=seed, regime=hp.regime)
    stats = TrainStats(regime=hp.regime)
    ctx = _LoopContext(params, hp, stats, out, progress, extra)
    logger.info("training %s/%s for %d frames (seed %d)", params.config.variant, hp.regime, hp.total_frames, seed)
    try:
        if hp.regime == Regime.DQN:
            _train_dqn(envs, params, hp, streams, ctx)
        else:
            _train_a2c(envs, params, hp, streams, ctx)
    finally:
        ctx.close()

    final = ctx.save(out / "final.ife", stats.frames) if out is not None else None
    return TrainResult(stats, params, final)


# ============================================================================
# Evaluation
# ============================================================================


def feature_fields(config: ModelConfig) -> Dict[Tuple[int, int], Tuple[int, int, int, int]]:
    """Receptive field (x0, x1, y0, y1) of every (row, col) encoder feature cell."""
    spec = ConvStackSpec(config.encoder.layers, config.input_w, config.input_h)
    h, w = config.encoder.feature_grid(config.input_h, config.input_w)
    fields = {}
    for n in range(h):
        for m in range(w):
            rf = receptive_field(spec, m, n)
            fields[(n, m)] = (rf.x_start, rf.x_end, rf.y_start, rf.y_end)
    return fields


def _cells_mask(
    cells: Sequence[Tuple[int, int]], cell_px: int, fields: Dict, grid: Tuple[int, int]
) -> np.ndarray:
    mask = np.zeros(grid, dtype=bool)
    for row, col in cells:
        x0, x1, y0, y1 = col * cell_px, (col + 1) * cell_px, row * cell_px, (row + 1) * cell_px
        for (n, m), (fx0, fx1, fy0, fy1) in fields.items():
            if fx0 < x1 and x0 < fx1 and fy0 < y1 and y0 < fy1:
                mask[n, m] = True
    return mask


def relevance_masks(
    state: CatchState, env, config: ModelConfig, fields: Optional[Dict] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Feature cells whose receptive field overlaps the ball or paddle
    (relevant) and those overlapping only distractors.
    """
    fields = fields if fields is not None else feature_fields(config)
    grid = config.encoder.feature_grid(config.input_h, config.input_w)
    cells = object_cells(state, env.cfg)
    relevant = _cells_mask(cells["ball"] + cells["paddle"], env.cfg.cell_px, fields, grid)
    distractor = _cells_mask(cells["distractors"], env.cfg.cell_px, fields, grid) & ~relevant
    return relevant, distractor


@dataclass
class EvalReport:
    episodes: int
    mean_return: float
    returns: List[float]
    attention_concentration: float
    distractor_share: float
    uniform_baseline: float
    mean_entropy: float

    def to_dict(self) -> Dict:
        return asdict(self)


FrameCallback = Callable[[int, int, np.ndarray, AttentionMask, CatchState], None]


def greedy_action(params: ModelParams, obs: np.ndarray):
    result = forward(params, obs)
    scores = result.q if result.q is not None else result.logits
    return int(np.argmax(scores.data)), result.mask


def evaluate(
    params: ModelParams,
    env: FrameStack,
    episodes: int,
    seed: Optional[int] = None,
    on_frame: Optional[FrameCallback] = None,
    trajectory: Optional[List[Tuple[int, int, float, bool]]] = None,
) -> EvalReport:
    """
    Greedy rollouts measuring return and where the attention goes.

    Every observation of an episode (reset and terminal included) is scored;
    ``on_frame(episode, step, obs, mask, state)`` sees each one. When
    ``trajectory`` is a list, (step, action, reward, terminal) rows are
    appended to it.
    """
    fields = feature_fields(params.config)
    returns, concentration, distractor, baseline, entropy = [], [], [], [], []
    step_index = 0
    obs = env.reset(seed)
    for episode in range(episodes):
        if episode:
            obs = env.reset()
        total, step, terminal = 0.0, 0, False
        while True:
            action, mask = greedy_action(params, obs)
            relevant, distract = relevance_masks(env.state, env, params.config, fields)
            concentration.append(float(mask.weights[relevant].sum()))
            distractor.append(float(mask.weights[distract].sum()))
            baseline.append(float(relevant.mean()))
            entropy.append(mask.entropy())
            if on_frame is not None:
                on_frame(episode, step, obs, mask, env.state)
            if terminal:
                break
            obs, reward, terminal = env.step(action)
            total += reward
            step += 1
            if trajectory is not None:
                trajectory.append((step_index, action, reward, terminal))
            step_index += 1
        returns.append(total)
    return EvalReport(
        episodes=episodes,
        mean_return=float(np.mean(returns)) if returns else float("nan"),
        returns=returns,
        attention_concentration=float(np.mean(concentration)) if concentration else float("nan"),
        distractor_share=float(np.mean(distractor)) if distractor else float("nan"),
        uniform_baseline=float(np.mean(baseline)) if baseline else float("nan"),
        mean_entropy=float(np.mean(entropy)) if entropy else float("nan"),
    )
