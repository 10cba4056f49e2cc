"""
Interpretable Feature Extractor Lab - Domain Records

This module defines the configuration records, constant classes and the
exception hierarchy shared by every other module:

- Constant classes (actions, regimes, profiles, model variants, ...)
- Frozen config dataclasses with ``validate()`` (env, HUE, AFE, model,
  hyperparameters, overlay)
- Value records passed between modules (Transition, DisplacementResult,
  ReceptiveField, AttentionMask)
- The ``IFEError`` hierarchy

Everything here is plain data: no numerics beyond shape bookkeeping and no I/O.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np

# ============================================================================
# Exceptions
# ============================================================================


class IFEError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(IFEError, ValueError):
    """
    A tensor did not have the shape an operation needs.

    The message always names the offending dimension so that a failure deep in
    a network points straight at the layer and axis that disagree.
    """

    def __init__(self, op: str, dimension: str, expected, actual):
        self.op = op
        self.dimension = dimension
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"{op}: dimension {dimension} expected {expected}, got {actual}"
        )


class NumericalError(IFEError, ArithmeticError):
    """NaN inputs, non-scalar losses, invalid optimizer settings."""


class GeometryError(IFEError, ValueError):
    """Invalid conv-stack geometry or out-of-range feature coordinates."""


class ConfigError(IFEError, ValueError):
    """Unknown, malformed or inconsistent configuration."""


class EnvError(IFEError, RuntimeError):
    """Illegal use of an environment (e.g. stepping a finished episode)."""


class ReplayError(IFEError, RuntimeError):
    """Replay sampling or n-step window problems."""


class CheckpointError(IFEError, ValueError):
    """Unreadable, truncated or mismatched checkpoint files."""


class ImageIOError(IFEError, OSError):
    """Image files that cannot be written or parsed."""


class TrainingDivergedError(IFEError, RuntimeError):
    """Raised when the training loss becomes NaN."""

    def __init__(self, message: str, dump_path: Optional[str] = None):
        self.dump_path = dump_path
        super().__init__(message)


# ============================================================================
# Constants
# ============================================================================


class Action:
    """
    Catch action set.

    LEFT / STAY / RIGHT move the paddle by -1 / 0 / +1 columns.
    """

    LEFT = 0
    STAY = 1
    RIGHT = 2

    ALL = (LEFT, STAY, RIGHT)
    DELTA = {LEFT: -1, STAY: 0, RIGHT: 1}


class Regime:
    """Training regimes."""

    DQN = "dqn"  # n-step double DQN with a dueling head
    A2C = "a2c"  # synchronous advantage actor-critic with GAE

    ALL = (DQN, A2C)


class Profile:
    """
    Hyperparameter profiles.

    DESK: scaled-down overrides that train Catch on a laptop.
    PAPER: the published training table, verbatim.
    """

    DESK = "desk"
    PAPER = "paper"

    ALL = (DESK, PAPER)


class HeadType:
    """Decision-making layer on top of the feature extractor."""

    DUELING_Q = "dueling-q"
    ACTOR_CRITIC = "actor-critic"

    ALL = (DUELING_Q, ACTOR_CRITIC)

    @staticmethod
    def for_regime(regime: str) -> str:
        return HeadType.DUELING_Q if regime == Regime.DQN else HeadType.ACTOR_CRITIC


class ModelVariant:
    """
    Feature extractor variants.

    IFE: non-overlapping encoding + attention, then the agent-friendly encoder.
    CNN: overlapping conv stack + the same attention + agent-friendly encoder.
    HUE_ONLY: non-overlapping encoding + attention straight into the head.
    """

    IFE = "ife"
    CNN = "cnn"
    HUE_ONLY = "hue_only"

    ALL = (IFE, CNN, HUE_ONLY)


class EnvVariant:
    """Catch flavours."""

    PLAIN = "plain"
    DISTRACTOR = "distractor"

    ALL = (PLAIN, DISTRACTOR)


class Verdict:
    """Spatial audit verdicts."""

    PRESERVING = "preserving"
    NON_PRESERVING = "non-preserving"


class NormMode:
    MAX = "max"
    SUM = "sum"

    ALL = (MAX, SUM)


class Colormap:
    GRAYSCALE = "grayscale"
    HEAT = "heat"

    ALL = (GRAYSCALE, HEAT)


# Distractor count used when a plain config is evaluated with --env distractor
DEFAULT_DISTRACTORS = 3


# ============================================================================
# Geometry records
# ============================================================================


@dataclass(frozen=True)
class ConvStackSpec:
    """
    An encoder front-end described only by its geometry.

    ``layers`` is an ordered tuple of (kernel, stride) pairs, applied to an
    ``input_width`` x ``input_height`` image without padding.
    """

    layers: Tuple[Tuple[int, int], ...]
    input_width: int
    input_height: int

    def __post_init__(self):
        object.__setattr__(
            self, "layers", tuple((int(k), int(s)) for k, s in self.layers)
        )

    @property
    def is_single_layer(self) -> bool:
        return len(self.layers) == 1

    @property
    def is_non_overlapping(self) -> bool:
        return all(k == s for k, s in self.layers)


@dataclass(frozen=True)
class DisplacementResult:
    m: int
    n: int
    l_x: int
    l_y: int
    d_x: float
    d_y: float


@dataclass(frozen=True)
class ReceptiveField:
    """Half-open pixel intervals [x_start, x_end) x [y_start, y_end)."""

    x_start: int
    x_end: int
    y_start: int
    y_end: int

    def contains(self, x: int, y: int) -> bool:
        return self.x_start <= x < self.x_end and self.y_start <= y < self.y_end


# ============================================================================
# Attention mask
# ============================================================================


@dataclass
class AttentionMask:
    """
    Softmax attention weights laid back on the feature grid.

    ``weights`` has shape (H_f, W_f) for a single observation or
    (N, H_f, W_f) for a batch; each grid sums to one.
    """

    weights: np.ndarray

    @property
    def height(self) -> int:
        return int(self.weights.shape[-2])

    @property
    def width(self) -> int:
        return int(self.weights.shape[-1])

    @property
    def is_batched(self) -> bool:
        return self.weights.ndim == 3

    def __getitem__(self, index: int) -> "AttentionMask":
        if not self.is_batched:
            raise IndexError("mask is not batched")
        return AttentionMask(self.weights[index])

    def is_valid(self, tol: float = 1e-9) -> bool:
        sums = self.weights.reshape(-1, self.height * self.width).sum(axis=1)
        return bool(np.all(self.weights >= 0.0) and np.all(np.abs(sums - 1.0) <= tol))

    def entropy(self) -> float:
        """Mean Shannon entropy (nats) over the masks in this record."""
        flat = self.weights.reshape(-1, self.height * self.width)
        safe = np.where(flat > 0.0, flat, 1.0)
        return float(np.mean(-np.sum(flat * np.log(safe), axis=1)))


# ============================================================================
# Environment records
# ============================================================================


@dataclass(frozen=True)
class EnvConfig:
    """
    Catch configuration.

    The rendered frame is (grid_h * cell_px) x (grid_w * cell_px) grayscale.
    ``episode_len`` counts rendered frames per episode (reset frame included),
    so an episode takes ``episode_len - 1`` steps. Zero means ``grid_h``.
    """

    grid_w: int = 10
    grid_h: int = 10
    cell_px: int = 4
    episode_len: int = 0
    distractors: int = 0
    seed: int = 0

    @property
    def frames_per_episode(self) -> int:
        return self.episode_len or self.grid_h

    @property
    def frame_height(self) -> int:
        return self.grid_h * self.cell_px

    @property
    def frame_width(self) -> int:
        return self.grid_w * self.cell_px

    def validate(self) -> "EnvConfig":
        if self.grid_w < 1 or self.grid_h < 2:
            raise ConfigError(f"grid must be at least 1x2, got {self.grid_w}x{self.grid_h}")
        if self.cell_px < 1:
            raise ConfigError(f"cell_px must be positive, got {self.cell_px}")
        if not 2 <= self.frames_per_episode <= self.grid_h:
            raise ConfigError(
                f"episode_len must be in [2, grid_h={self.grid_h}], got {self.frames_per_episode}"
            )
        if self.distractors < 0:
            raise ConfigError(f"distractors must be >= 0, got {self.distractors}")
        return self


@dataclass
class Transition:
    """The (s, a, r, s', terminal) atom collected from an environment."""

    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    terminal: bool


# ============================================================================
# Network configs
# ============================================================================


def _layers_tuple(layers) -> Tuple[Tuple[int, int], ...]:
    return tuple((int(k), int(s)) for k, s in layers)


@dataclass(frozen=True)
class HueConfig:
    """
    Human-Understandable Encoding.

    ``layers`` are (kernel, stride) pairs with kernel == stride, ``channels``
    the output width of each layer, ``attention_dim`` the size of the attention
    domain the first attention layer maps into.
    """

    layers: Tuple[Tuple[int, int], ...] = ((2, 2), (2, 2))
    channels: Tuple[int, ...] = (16, 32)
    attention_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "layers", _layers_tuple(self.layers))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    @property
    def overlapping_allowed(self) -> bool:
        return False

    def feature_grid(self, height: int, width: int) -> Tuple[int, int]:
        h, w = height, width
        for kernel, stride in self.layers:
            h = (h - kernel) // stride + 1
            w = (w - kernel) // stride + 1
        return h, w

    def validate(self, height: Optional[int] = None, width: Optional[int] = None):
        if not self.layers:
            raise ConfigError("encoder needs at least one conv layer")
        if len(self.layers) != len(self.channels):
            raise ConfigError(
                f"{len(self.layers)} conv layers but {len(self.channels)} channel entries"
            )
        for index, (kernel, stride) in enumerate(self.layers):
            if kernel < 1 or stride < 1:
                raise ConfigError(f"layer {index}: kernel and stride must be positive")
            if not self.overlapping_allowed and kernel != stride:
                raise ConfigError(
                    f"layer {index}: non-overlapping encoding needs stride == kernel, "
                    f"got kernel={kernel} stride={stride}"
                )
        if any(c < 1 for c in self.channels):
            raise ConfigError("channel counts must be positive")
        if self.attention_dim < 1:
            raise ConfigError("attention_dim must be positive")
        if height is not None and width is not None:
            h, w = height, width
            for index, (kernel, stride) in enumerate(self.layers):
                if kernel > h or kernel > w:
                    raise ConfigError(f"layer {index}: kernel {kernel} exceeds extent {h}x{w}")
                h = (h - kernel) // stride + 1
                w = (w - kernel) // stride + 1
            if h < 2 or w < 2:
                raise ConfigError(f"feature grid {h}x{w} is smaller than 2x2")
        return self


@dataclass(frozen=True)
class CnnConfig(HueConfig):
    """Overlapping conv stack for the baseline (stride < kernel allowed)."""

    layers: Tuple[Tuple[int, int], ...] = ((4, 2), (4, 2))

    @property
    def overlapping_allowed(self) -> bool:
        return True


@dataclass(frozen=True)
class AfeConfig:
    """
    Agent-Friendly Encoding: max pool, residual blocks, adaptive max pool.

    ``width`` is the residual channel width; when it differs from the encoder
    output a 1x1 projection conv is inserted before pooling.
    """

    pool_kernel: int = 2
    pool_stride: int = 2
    blocks: int = 2
    width: int = 32
    adaptive_hw: Tuple[int, int] = (3, 3)

    def __post_init__(self):
        object.__setattr__(self, "adaptive_hw", tuple(int(v) for v in self.adaptive_hw))

    @property
    def embedding_dim(self) -> int:
        return self.width * self.adaptive_hw[0] * self.adaptive_hw[1]

    def validate(self) -> "AfeConfig":
        if self.blocks < 1:
            raise ConfigError(f"residual block count must be >= 1, got {self.blocks}")
        if self.pool_kernel < 1 or self.pool_stride < 1:
            raise ConfigError("pool kernel and stride must be positive")
        if self.width < 1 or min(self.adaptive_hw) < 1:
            raise ConfigError("AFE width and adaptive dims must be positive")
        return self


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild a network from scratch."""

    variant: str = ModelVariant.IFE
    head: str = HeadType.DUELING_Q
    in_channels: int = 4
    input_h: int = 40
    input_w: int = 40
    num_actions: int = 3
    head_hidden: int = 64
    hue: HueConfig = field(default_factory=HueConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    afe: AfeConfig = field(default_factory=AfeConfig)

    @property
    def encoder(self) -> HueConfig:
        return self.cnn if self.variant == ModelVariant.CNN else self.hue

    def validate(self) -> "ModelConfig":
        if self.variant not in ModelVariant.ALL:
            raise ConfigError(f"unknown model variant {self.variant!r}")
        if self.head not in HeadType.ALL:
            raise ConfigError(f"unknown head type {self.head!r}")
        if self.in_channels < 1 or self.num_actions < 1 or self.head_hidden < 0:
            raise ConfigError("in_channels and num_actions must be positive")
        self.encoder.validate(self.input_h, self.input_w)
        if self.variant != ModelVariant.HUE_ONLY:
            self.afe.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "ModelConfig":
        data = dict(data)
        hue = HueConfig(**data.pop("hue"))
        cnn = CnnConfig(**data.pop("cnn"))
        afe = AfeConfig(**data.pop("afe"))
        return ModelConfig(hue=hue, cnn=cnn, afe=afe, **data)


# ============================================================================
# Training hyperparameters
# ============================================================================


@dataclass(frozen=True)
class Hyperparams:
    """
    Hyperparameters for both regimes.

    ``adam_eps`` of 0 means "0.005 / batch_size" for the value regime and 1e-8
    for the actor-critic regime. ``grad_clip`` of 0 disables clipping.
    """

    regime: str = Regime.DQN
    gamma: float = 0.99
    n_step: int = 3
    lr: float = 0.00025
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_decay_frames: int = 50_000
    target_update_frames: int = 2_000
    batch_size: int = 32
    adam_eps: float = 0.0
    amsgrad: bool = False
    grad_clip: float = 10.0
    gae_lambda: float = 0.92
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    num_envs: int = 8
    total_frames: int = 200_000
    replay_capacity: int = 20_000
    learning_starts: int = 1_000
    update_every: int = 4
    frameskip: int = 1
    framestack: int = 4
    checkpoint_every: int = 50_000

    @property
    def effective_adam_eps(self) -> float:
        if self.adam_eps > 0:
            return self.adam_eps
        if self.regime == Regime.DQN:
            return 0.005 / self.batch_size
        return 1e-8

    def validate(self) -> "Hyperparams":
        if self.regime not in Regime.ALL:
            raise ConfigError(f"unknown regime {self.regime!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.eps_end > self.eps_start:
            raise ConfigError("eps_end must not exceed eps_start")
        if self.n_step < 1:
            raise ConfigError(f"n_step must be >= 1, got {self.n_step}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.num_envs < 1:
            raise ConfigError("batch_size and num_envs must be positive")
        if self.frameskip < 1 or self.framestack < 1:
            raise ConfigError("frameskip and framestack must be >= 1")
        if self.target_update_frames < 1:
            raise ConfigError(f"target_update_frames must be positive, got {self.target_update_frames}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if self.replay_capacity < self.batch_size:
            raise ConfigError("replay_capacity must hold at least one batch")
        if self.total_frames < 1 or self.update_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("frame counts must be positive")
        if math.isnan(self.grad_clip) or self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")
        return self


# ============================================================================
# Visualization config
# ============================================================================


@dataclass(frozen=True)
class OverlayConfig:
    darken_factor: float = 0.25
    normalization: str = NormMode.MAX
    colormap: str = Colormap.GRAYSCALE

    def validate(self) -> "OverlayConfig":
        if not 0.0 <= self.darken_factor <= 1.0:
            raise ConfigError(f"darken_factor must be in [0, 1], got {self.darken_factor}")
        if self.normalization not in NormMode.ALL:
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.colormap not in Colormap.ALL:
            raise ConfigError(f"unknown colormap {self.colormap!r}")
        return self
