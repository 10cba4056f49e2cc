"""
Interpretable Feature Extractor - Networks

Builds and runs the three feature-extractor variants on top of tensor_core:

- Human-Understandable Encoding (HUE): non-overlapping conv layers + ReLU,
  spatial flattening into per-location vectors z_i, a two-layer attention
  transform (linear -> tanh -> linear) producing logits e_i, a softmax over
  locations giving alpha_i, and masked features z_i * alpha_i laid back on the
  grid.
- Agent-Friendly Encoding (AFE): optional 1x1 projection, max pooling,
  residual blocks (ReLU-conv3x3-ReLU-conv3x3 + skip), adaptive max pooling,
  flatten.
- Decision heads: dueling Q (V + A - mean A) or actor-critic (policy logits +
  value), with an optional shared hidden layer.

The overlapping CNN baseline reuses the same attention on a stride < kernel
stack. Parameters live in ``ModelParams``; forward passes never mutate them
and may run concurrently for inference.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np

from models import (
    AfeConfig,
    AttentionMask,
    CnnConfig,
    HeadType,
    HueConfig,
    ModelConfig,
    ModelVariant,
    ShapeError,
)
from tensor_core import (
    Tensor,
    adaptive_maxpool,
    conv2d,
    linear,
    maxpool2d,
    mean,
    mul,
    pad2d,
    relu,
    reshape,
    residual_add,
    softmax,
    tanh,
    transpose,
)

logger = logging.getLogger(__name__)

RELU_GAIN = float(np.sqrt(2.0))

# ============================================================================
# Parameters
# ============================================================================


def fingerprint(config: ModelConfig) -> str:
    """Stable hash of the architecture config."""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass
class ModelParams:
    """
    Named parameter tensors plus the config that created them.

    Behaves as a read-only mapping name -> Tensor.
    """

    config: ModelConfig
    tensors: Dict[str, Tensor]
    fingerprint: str

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def keys(self):
        return self.tensors.keys()

    def values(self):
        return self.tensors.values()

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> Dict[str, Optional[np.ndarray]]:
        return {name: t.grad for name, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        tensors = {
            name: Tensor(t.data.copy(), requires_grad=True, name=name)
            for name, t in self.tensors.items()
        }
        return ModelParams(self.config, tensors, self.fingerprint)

    def load_from(self, other: "ModelParams") -> None:
        """Overwrite every array in place with ``other``'s values."""
        if other.fingerprint != self.fingerprint:
            raise ShapeError("load_from", "fingerprint", self.fingerprint, other.fingerprint)
        for name, t in self.tensors.items():
            np.copyto(t.data, other.tensors[name].data)


def _orthogonal(rng: np.random.Generator, shape: Tuple[int, ...], gain: float) -> np.ndarray:
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray((gain * q).reshape(shape))


def encoder_prefix(config: ModelConfig) -> str:
    return "cnn" if config.variant == ModelVariant.CNN else "hue"


def feature_shape(config: ModelConfig) -> Tuple[int, int, int]:
    """(C_f, H_f, W_f) of the encoder output."""
    h, w = config.encoder.feature_grid(config.input_h, config.input_w)
    return config.encoder.channels[-1], h, w


def embedding_dim(config: ModelConfig) -> int:
    if config.variant == ModelVariant.HUE_ONLY:
        c, h, w = feature_shape(config)
        return c * h * w
    return config.afe.embedding_dim


def param_layout(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...], float]]:
    """
    Ordered (name, shape, init gain) for every parameter of a model.

    Biases have gain 0 (zero init).
    """
    layout: List[Tuple[str, Tuple[int, ...], float]] = []
    encoder = config.encoder
    prefix = encoder_prefix(config)

    in_ch = config.in_channels
    for i, ((kernel, _stride), out_ch) in enumerate(zip(encoder.layers, encoder.channels)):
        layout.append((f"{prefix}.conv{i}.weight", (out_ch, in_ch, kernel, kernel), RELU_GAIN))
        layout.append((f"{prefix}.conv{i}.bias", (out_ch,), 0.0))
        in_ch = out_ch

    feat_ch = encoder.channels[-1]
    layout += [
        ("att.w1", (encoder.attention_dim, feat_ch), 1.0),
        ("att.b1", (encoder.attention_dim,), 0.0),
        ("att.w2", (1, encoder.attention_dim), 1.0),
        ("att.b2", (1,), 0.0),
    ]

    if config.variant != ModelVariant.HUE_ONLY:
        afe = config.afe
        if afe.width != feat_ch:
            layout.append(("afe.proj.weight", (afe.width, feat_ch, 1, 1), 1.0))
            layout.append(("afe.proj.bias", (afe.width,), 0.0))
        for b in range(afe.blocks):
            for j in (1, 2):
                layout.append((f"afe.block{b}.conv{j}.weight", (afe.width, afe.width, 3, 3), RELU_GAIN))
                layout.append((f"afe.block{b}.conv{j}.bias", (afe.width,), 0.0))

    width = embedding_dim(config)
    if config.head_hidden:
        layout.append(("head.hidden.weight", (config.head_hidden, width), RELU_GAIN))
        layout.append(("head.hidden.bias", (config.head_hidden,), 0.0))
        width = config.head_hidden
    if config.head == HeadType.DUELING_Q:
        layout += [
            ("head.value.weight", (1, width), 1.0),
            ("head.value.bias", (1,), 0.0),
            ("head.adv.weight", (config.num_actions, width), 1.0),
            ("head.adv.bias", (config.num_actions,), 0.0),
        ]
    else:
        layout += [
            ("head.policy.weight", (config.num_actions, width), 0.01),
            ("head.policy.bias", (config.num_actions,), 0.0),
            ("head.value.weight", (1, width), 1.0),
            ("head.value.bias", (1,), 0.0),
        ]
    return layout


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """
    Build a fresh parameter set.

    Weights use orthogonal init (gain sqrt(2) ahead of ReLU), biases start at
    zero. Identical (config, seed) gives bit-identical parameters.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    tensors: Dict[str, Tensor] = {}
    for name, shape, gain in param_layout(config):
        data = np.zeros(shape) if gain == 0.0 else _orthogonal(rng, shape, gain)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    params = ModelParams(config, tensors, fingerprint(config))
    logger.debug("initialised %s model with %d parameters", config.variant, params.count())
    return params


# ============================================================================
# Human-Understandable Encoding
# ============================================================================


def _as_batch(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 4:
        return x, True
    return reshape(x, (1,) + x.shape), False


def encode(obs: Tensor, params: Mapping[str, Tensor], layers, prefix: str) -> Tensor:
    """Conv + ReLU stack; returns pre-attention features (N, C_f, H_f, W_f)."""
    x = obs
    for i, (_kernel, stride) in enumerate(layers):
        x = relu(conv2d(x, params[f"{prefix}.conv{i}.weight"], params[f"{prefix}.conv{i}.bias"], stride))
    return x


def attention_weights(z: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """
    Attention over locations.

    e_i = W2 tanh(W1 z_i + b1) + b2, shared across locations, then
    alpha = softmax(e) over the L locations.

    Args:
        z: (..., L, C_f) location vectors

    Returns:
        (..., L) attention weights summing to one
    """
    hidden = tanh(linear(z, params["att.w1"], params["att.b1"]))
    logits = linear(hidden, params["att.w2"], params["att.b2"])
    return softmax(reshape(logits, logits.shape[:-1]), axis=-1)


def _attend(features: Tensor, params: Mapping[str, Tensor]) -> Tuple[Tensor, Tensor]:
    n, c, h, w = features.shape
    locations = transpose(reshape(features, (n, c, h * w)), (0, 2, 1))
    alpha = attention_weights(locations, params)
    masked = mul(locations, reshape(alpha, (n, h * w, 1)))
    masked = reshape(transpose(masked, (0, 2, 1)), (n, c, h, w))
    return masked, alpha


def _check_divisible(obs: Tensor, cfg: HueConfig) -> None:
    h, w = obs.shape[-2:]
    for index, (kernel, stride) in enumerate(cfg.layers):
        if h % stride or w % stride or kernel > min(h, w):
            raise ShapeError(f"hue layer {index}", "H/W", f"divisible by stride {stride}", (h, w))
        h, w = (h - kernel) // stride + 1, (w - kernel) // stride + 1


class EncoderOutput(NamedTuple):
    masked: Tensor
    mask: AttentionMask


def _encoder_forward(obs: Tensor, params, cfg: HueConfig, prefix: str) -> EncoderOutput:
    batch, batched = _as_batch(obs)
    features = encode(batch, params, cfg.layers, prefix)
    masked, alpha = _attend(features, params)
    _, _, h, w = features.shape
    weights = alpha.data.reshape(-1, h, w)
    if not batched:
        masked = reshape(masked, masked.shape[1:])
        weights = weights[0]
    return EncoderOutput(masked, AttentionMask(weights.copy()))


def hue_forward(obs: Tensor, params: Mapping[str, Tensor], cfg: HueConfig) -> EncoderOutput:
    """
    Non-overlapping encoding with soft attention.

    Args:
        obs: (C, H, W) or (N, C, H, W) observation in [0, 1]
        params: model parameters (``hue.*`` and ``att.*``)
        cfg: HUE config (stride == kernel in every layer)

    Returns:
        (masked_features, mask): masked features in the conv output layout and
        the attention weights on the H_f x W_f grid
    """
    obs = obs if isinstance(obs, Tensor) else Tensor(obs)
    _check_divisible(obs, cfg)
    return _encoder_forward(obs, params, cfg, "hue")


def cnn_baseline_forward(
    obs: Tensor, params: Mapping[str, Tensor], cfg: Optional[CnnConfig] = None
) -> EncoderOutput:
    """Same attention on an overlapping conv stack; the mask is a pseudo-mask
    on the coarser, displaced grid."""
    obs = obs if isinstance(obs, Tensor) else Tensor(obs)
    cfg = cfg or params.config.cnn
    return _encoder_forward(obs, params, cfg, "cnn")


def pre_attention_features(obs: np.ndarray, params: ModelParams) -> np.ndarray:
    """Raw encoder features z (before masking) for probing spatial dependence."""
    cfg = params.config.encoder
    x = Tensor(obs)
    batch, batched = _as_batch(x)
    out = encode(batch, params, cfg.layers, encoder_prefix(params.config)).data
    return out if batched else out[0]


# ============================================================================
# Agent-Friendly Encoding
# ============================================================================


def afe_forward(masked: Tensor, params: Mapping[str, Tensor], cfg: AfeConfig) -> Tensor:
    """
    Max pool -> residual blocks -> adaptive max pool -> flatten.

    Residual convs are 3x3 stride 1 with one pixel of zero padding, so block
    inputs and outputs share a shape.

    Returns:
        (N, D) or (D,) embedding with D = width * adaptive_h * adaptive_w
    """
    x, batched = _as_batch(masked)
    if "afe.proj.weight" in params:
        x = conv2d(x, params["afe.proj.weight"], params["afe.proj.bias"], 1)

    height, width = x.shape[-2:]
    if cfg.pool_kernel > min(height, width):
        raise ShapeError("afe pool", "H/W", f">= {cfg.pool_kernel}", (height, width))
    x = maxpool2d(x, cfg.pool_kernel, cfg.pool_stride)

    for b in range(cfg.blocks):
        y = relu(x)
        y = conv2d(pad2d(y, 1), params[f"afe.block{b}.conv1.weight"], params[f"afe.block{b}.conv1.bias"], 1)
        y = relu(y)
        y = conv2d(pad2d(y, 1), params[f"afe.block{b}.conv2.weight"], params[f"afe.block{b}.conv2.bias"], 1)
        x = residual_add(x, y)

    out_h, out_w = cfg.adaptive_hw
    if out_h > x.shape[-2] or out_w > x.shape[-1]:
        raise ShapeError("afe adaptive pool", "H/W", f">= {cfg.adaptive_hw}", x.shape[-2:])
    x = adaptive_maxpool(x, out_h, out_w)
    embedding = reshape(x, (x.shape[0], -1))
    return embedding if batched else reshape(embedding, embedding.shape[1:])


# ============================================================================
# Decision heads
# ============================================================================


def _hidden(embedding: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    if "head.hidden.weight" in params:
        return relu(linear(embedding, params["head.hidden.weight"], params["head.hidden.bias"]))
    return embedding


def dueling_combine(value: Tensor, advantages: Tensor) -> Tensor:
    """Q(a) = V + A(a) - mean_a' A(a')."""
    return value + advantages - mean(advantages, axis=-1, keepdims=True)


def dueling_q(embedding: Tensor, params: Mapping[str, Tensor], num_actions: int) -> Tensor:
    h = _hidden(embedding, params)
    value = linear(h, params["head.value.weight"], params["head.value.bias"])
    advantages = linear(h, params["head.adv.weight"], params["head.adv.bias"])
    if advantages.shape[-1] != num_actions:
        raise ShapeError("dueling_q", "num_actions", num_actions, advantages.shape[-1])
    return dueling_combine(value, advantages)


def actor_critic_heads(
    embedding: Tensor, params: Mapping[str, Tensor], num_actions: int
) -> Tuple[Tensor, Tensor]:
    """Policy logits (..., A) and state value (...) off a shared embedding."""
    h = _hidden(embedding, params)
    logits = linear(h, params["head.policy.weight"], params["head.policy.bias"])
    if logits.shape[-1] != num_actions:
        raise ShapeError("actor_critic_heads", "num_actions", num_actions, logits.shape[-1])
    value = linear(h, params["head.value.weight"], params["head.value.bias"])
    return logits, reshape(value, value.shape[:-1])


# ============================================================================
# Whole-model forward
# ============================================================================


class ForwardResult(NamedTuple):
    q: Optional[Tensor]
    logits: Optional[Tensor]
    value: Optional[Tensor]
    mask: AttentionMask


def extract_features(obs, params: ModelParams) -> Tuple[Tensor, AttentionMask]:
    """Observation -> embedding fed to the decision head, plus the mask."""
    config = params.config
    obs = obs if isinstance(obs, Tensor) else Tensor(obs)
    if config.variant == ModelVariant.CNN:
        masked, mask = cnn_baseline_forward(obs, params, config.cnn)
    else:
        masked, mask = hue_forward(obs, params, config.hue)

    if config.variant == ModelVariant.HUE_ONLY:
        batch, batched = _as_batch(masked)
        embedding = reshape(batch, (batch.shape[0], -1))
        if not batched:
            embedding = reshape(embedding, embedding.shape[1:])
    else:
        embedding = afe_forward(masked, params, config.afe)
    return embedding, mask


def forward(params: ModelParams, obs) -> ForwardResult:
    """Run the full network on one observation (C,H,W) or a batch (N,C,H,W)."""
    config = params.config
    embedding, mask = extract_features(obs, params)
    if config.head == HeadType.DUELING_Q:
        return ForwardResult(dueling_q(embedding, params, config.num_actions), None, None, mask)
    logits, value = actor_critic_heads(embedding, params, config.num_actions)
    return ForwardResult(None, logits, value, mask)
