"""
Run Configuration

Builds the full run configuration (env, model, hyperparameters, seed) from
three layers, later layers winning:

1. Profile defaults: ``desk`` (laptop-sized runs) or ``paper`` (the
   published training table), per regime (``dqn`` / ``a2c``)
2. A JSON config file with flat dotted keys, e.g.
   ``{"env.grid_w": 10, "hue.channels": [16, 32], "train.total_frames": 5000}``
3. Command-line overrides (same dotted keys)

Sections: ``env``, ``hue``, ``cnn``, ``afe``, ``model``, ``train`` and the
top-level ``seed``. Unknown keys fail fast with ConfigError. Model input
shape, channel count and head type are derived from the env, framestack and
regime, so they cannot be set directly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from models import (
    AfeConfig,
    CnnConfig,
    ConfigError,
    EnvConfig,
    HeadType,
    HueConfig,
    Hyperparams,
    ModelConfig,
    Profile,
    Regime,
)

logger = logging.getLogger(__name__)

# ============================================================================
# Profiles
# ============================================================================

PROFILES: Dict[str, Dict[str, Dict[str, Any]]] = {
    Profile.DESK: {
        Regime.DQN: {
            "frameskip": 1,
            "framestack": 4,
            "n_step": 3,
            "lr": 0.00025,
            "eps_decay_frames": 50_000,
            "target_update_frames": 2_000,
            "batch_size": 32,
            "replay_capacity": 20_000,
            "learning_starts": 1_000,
            "update_every": 4,
            "grad_clip": 10.0,
            "total_frames": 200_000,
        },
        Regime.A2C: {
            "frameskip": 1,
            "framestack": 4,
            "n_step": 20,
            "num_envs": 8,
            "lr": 0.0001,
            "amsgrad": True,
            "gae_lambda": 0.92,
            "grad_clip": 10.0,
            "total_frames": 300_000,
        },
    },
    Profile.PAPER: {
        Regime.DQN: {
            "frameskip": 4,
            "framestack": 4,
            "n_step": 3,
            "lr": 0.00025,
            "eps_start": 1.0,
            "eps_end": 0.01,
            "eps_decay_frames": 1_000_000,
            "target_update_frames": 32_000,
            "batch_size": 256,
            "grad_clip": 10.0,
        },
        Regime.A2C: {
            "frameskip": 4,
            "framestack": 1,
            "n_step": 20,
            "num_envs": 8,
            "lr": 0.0001,
            "amsgrad": True,
            "gae_lambda": 0.92,
            "grad_clip": 0.0,
        },
    },
}

SECTIONS = {
    "env": EnvConfig,
    "hue": HueConfig,
    "cnn": CnnConfig,
    "afe": AfeConfig,
    "model": ModelConfig,
    "train": Hyperparams,
}

# Derived from env / regime; not user-settable
DERIVED_MODEL_KEYS = {"head", "in_channels", "input_h", "input_w", "num_actions", "hue", "cnn", "afe"}


def profile_hyperparams(profile: str = Profile.DESK, regime: str = Regime.DQN) -> Hyperparams:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {', '.join(Profile.ALL)}")
    if regime not in Regime.ALL:
        raise ConfigError(f"unknown regime {regime!r}; choose from {', '.join(Regime.ALL)}")
    return Hyperparams(regime=regime, **PROFILES[profile][regime])


# ============================================================================
# Run config
# ============================================================================


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig
    model: ModelConfig
    train: Hyperparams
    seed: int = 0
    profile: str = Profile.DESK

    def to_dict(self) -> Dict[str, Any]:
        return {
            "env": _asdict(self.env),
            "model": self.model.to_dict(),
            "train": _asdict(self.train),
            "seed": self.seed,
            "profile": self.profile,
        }


def _asdict(record) -> Dict[str, Any]:
    return {f.name: getattr(record, f.name) for f in fields(record)}


def _flatten(data: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Accept nested section objects as well as dotted keys."""
    flat: Dict[str, Any] = {}
    for key, value in data.items():
        name = f"{prefix}.{key}" if prefix else key
        if isinstance(value, Mapping) and not prefix and key in SECTIONS:
            flat.update(_flatten(value, name))
        else:
            flat[name] = value
    return flat


def _coerce(key: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def _split(values: Mapping[str, Any]) -> Dict[str, Dict[str, Any]]:
    grouped: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
    for key, value in values.items():
        if key == "seed":
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        known = {f.name: f for f in fields(SECTIONS[section])}
        if name not in known or (section == "model" and name in DERIVED_MODEL_KEYS):
            raise ConfigError(f"unknown config key {key!r}")
        grouped[section][name] = value
    return grouped


def _apply(key_prefix: str, record, updates: Mapping[str, Any]):
    if not updates:
        return record
    coerced = {
        name: _coerce(f"{key_prefix}.{name}", getattr(record, name), value) for name, value in updates.items()
    }
    try:
        return replace(record, **coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key_prefix}: {exc}") from exc


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return _flatten(data)


def build_run_config(
    values: Mapping[str, Any],
    profile: str = Profile.DESK,
    regime: str = Regime.DQN,
    seed: Optional[int] = None,
) -> RunConfig:
    """Layer ``values`` (flat dotted keys) over the profile and validate everything."""
    hp = profile_hyperparams(profile, regime)
    grouped = _split(values)

    env = _apply("env", EnvConfig(), grouped["env"]).validate()
    hp = _apply("train", hp, grouped["train"])
    if hp.regime != regime:
        raise ConfigError(f"train.regime {hp.regime!r} conflicts with the selected regime {regime!r}")
    hp.validate()

    model = ModelConfig(
        head=HeadType.for_regime(regime),
        in_channels=hp.framestack,
        input_h=env.frame_height,
        input_w=env.frame_width,
        hue=_apply("hue", HueConfig(), grouped["hue"]),
        cnn=_apply("cnn", CnnConfig(), grouped["cnn"]),
        afe=_apply("afe", AfeConfig(), grouped["afe"]),
    )
    model = _apply("model", model, grouped["model"]).validate()

    run_seed = values.get("seed", 0) if seed is None else seed
    run_seed = _coerce("seed", 0, run_seed)
    for key, value in values.items():
        logger.debug("config override %s = %r", key, value)
    return RunConfig(env=env, model=model, train=hp, seed=run_seed, profile=profile)


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    profile: str = Profile.DESK,
    regime: str = Regime.DQN,
    seed: Optional[int] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """File values override the profile; ``overrides`` and ``seed`` override the file."""
    values: Dict[str, Any] = read_config_file(path) if path is not None else {}
    values.update(overrides or {})
    return build_run_config(values, profile, regime, seed)


def parse_override(text: str) -> Dict[str, Any]:
    """``"train.total_frames=5000"`` -> {"train.total_frames": 5000} (value parsed as JSON)."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"malformed override {text!r}; expected KEY=VALUE")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {key.strip(): value}
