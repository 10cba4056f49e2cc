"""
Tests for the feature extractor networks: attention, encoders, heads.
"""

import math

import numpy as np
import pytest

from conftest import tiny_model_config
from ife_net import (
    actor_critic_heads,
    afe_forward,
    attention_weights,
    cnn_baseline_forward,
    dueling_combine,
    dueling_q,
    embedding_dim,
    extract_features,
    fingerprint,
    forward,
    hue_forward,
    init_params,
    param_layout,
    pre_attention_features,
)
from models import (
    AfeConfig,
    CnnConfig,
    ConvStackSpec,
    HeadType,
    HueConfig,
    ModelConfig,
    ModelVariant,
    ShapeError,
    ConfigError,
)
from spatial_audit import naive_upsample_map, receptive_field
from tensor_core import Tape, Tensor, gradcheck, huber_loss, log_softmax, mean, mul, select, softmax, tsum


def random_obs(rng, config, batch=None):
    shape = (config.in_channels, config.input_h, config.input_w)
    return rng.random(shape if batch is None else (batch,) + shape)


# ============================================================================
# Parameters
# ============================================================================


def test_init_is_deterministic(tiny_config):
    a, b = init_params(tiny_config, 7), init_params(tiny_config, 7)
    assert list(a.keys()) == list(b.keys())
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    c = init_params(tiny_config, 8)
    assert not np.array_equal(a["hue.conv0.weight"].data, c["hue.conv0.weight"].data)


@pytest.mark.parametrize("variant", ModelVariant.ALL)
def test_init_arrays_are_c_contiguous(variant):
    params = init_params(tiny_model_config(variant=variant), 0)
    for name, tensor in params.items():
        assert tensor.data.flags.c_contiguous, name


def test_param_names_unique_and_fingerprint_stable(tiny_config):
    names = [name for name, _, _ in param_layout(tiny_config)]
    assert len(names) == len(set(names))
    params = init_params(tiny_config, 0)
    assert params.fingerprint == fingerprint(tiny_config)
    assert fingerprint(tiny_model_config(head_hidden=4)) != params.fingerprint


def test_projection_only_when_widths_differ(tiny_config):
    assert "afe.proj.weight" not in init_params(tiny_config, 0)
    wide = tiny_model_config(afe=AfeConfig(pool_kernel=1, pool_stride=1, blocks=1, width=5, adaptive_hw=(1, 1)))
    params = init_params(wide, 0)
    assert params["afe.proj.weight"].shape == (5, 3, 1, 1)


def test_copy_and_load_from(tiny_config):
    a = init_params(tiny_config, 0)
    b = a.copy()
    b["att.w1"].data += 1.0
    assert not np.array_equal(a["att.w1"].data, b["att.w1"].data)
    a.load_from(b)
    np.testing.assert_array_equal(a["att.w1"].data, b["att.w1"].data)
    with pytest.raises(ShapeError):
        a.load_from(init_params(tiny_model_config(head_hidden=4), 0))


# ============================================================================
# Attention
# ============================================================================


def test_mask_validity_over_random_observations(tiny_config, rng):
    params = init_params(tiny_config, 3)
    _, mask = hue_forward(random_obs(rng, tiny_config, batch=1000), params, tiny_config.hue)
    assert mask.is_batched and mask.weights.shape == (1000, 2, 2)
    assert mask.is_valid(1e-9)


def test_attention_uniform_when_second_layer_zero(tiny_config, rng):
    params = init_params(tiny_config, 0)
    params["att.w2"].data[:] = 0.0
    params["att.b2"].data[:] = 0.7
    z = Tensor(rng.standard_normal((9, 3)))
    np.testing.assert_allclose(attention_weights(z, params).data, np.full(9, 1 / 9))


def test_uniform_attention_scales_features_by_location_count(tiny_config, rng):
    params = init_params(tiny_config, 0)
    params["att.w2"].data[:] = 0.0
    obs = random_obs(rng, tiny_config)
    masked, mask = hue_forward(obs, params, tiny_config.hue)
    raw = pre_attention_features(obs, params)
    np.testing.assert_allclose(mask.weights, np.full((2, 2), 0.25))
    np.testing.assert_allclose(masked.data, raw / 4.0, atol=1e-15)


def test_attention_two_location_toy():
    params = {
        "att.w1": Tensor([[1.0]]),
        "att.b1": Tensor([0.0]),
        "att.w2": Tensor([[math.log(2.0) / math.tanh(1.0)]]),
        "att.b2": Tensor([0.0]),
    }
    z = Tensor([[1.0], [0.0]])
    np.testing.assert_allclose(attention_weights(z, params).data, [2 / 3, 1 / 3])


def test_raising_one_logit_raises_its_weight(rng):
    for _ in range(20):
        e = rng.standard_normal(6)
        i = int(rng.integers(6))
        bumped = e.copy()
        bumped[i] += rng.uniform(0.01, 3.0)
        assert softmax(bumped).data[i] > softmax(e).data[i]


def test_indivisible_input_names_layer(tiny_config, rng):
    params = init_params(tiny_config, 0)
    with pytest.raises(ShapeError) as err:
        hue_forward(rng.random((1, 9, 9)), params, tiny_config.hue)
    assert "hue layer 0" in str(err.value)


# ============================================================================
# Spatial bijection
# ============================================================================


def _positive_params(config, seed):
    params = init_params(config, seed)
    for tensor in params.values():
        np.abs(tensor.data, out=tensor.data)
    return params


def _dependence(params, config, rng):
    """For every pixel, the feature cells whose vector changes when it is bumped."""
    image = rng.uniform(0.1, 0.9, (config.in_channels, config.input_h, config.input_w))
    base = pre_attention_features(image, params)
    changes = {}
    for y in range(config.input_h):
        for x in range(config.input_w):
            bumped = image.copy()
            bumped[:, y, x] += 0.05
            diff = np.any(pre_attention_features(bumped, params) != base, axis=0)
            changes[(x, y)] = {(int(n), int(m)) for n, m in zip(*np.nonzero(diff))}
    return changes


def test_hue_features_depend_exactly_on_receptive_field(rng):
    config = ModelConfig(in_channels=1, input_h=16, input_w=16)
    params = _positive_params(config, 0)
    spec = ConvStackSpec(config.hue.layers, 16, 16)
    h, w = config.hue.feature_grid(16, 16)
    violations = 0
    for (x, y), cells in _dependence(params, config, rng).items():
        expected = {(n, m) for n in range(h) for m in range(w) if receptive_field(spec, m, n).contains(x, y)}
        violations += len(cells ^ expected)
    assert violations == 0


def test_cnn_baseline_breaks_spatial_bijection(rng):
    config = ModelConfig(variant=ModelVariant.CNN, in_channels=1, input_h=16, input_w=16)
    params = _positive_params(config, 0)
    h, w = config.cnn.feature_grid(16, 16)
    dependence = _dependence(params, config, rng)
    for n in range(h):
        row_violations = 0
        for m in range(w):
            x0, x1 = naive_upsample_map(w, 16, m)
            y0, y1 = naive_upsample_map(h, 16, n)
            for (x, y), cells in dependence.items():
                outside = not (x0 <= x < x1 and y0 <= y < y1)
                if outside and (n, m) in cells:
                    row_violations += 1
        assert row_violations >= 1


def test_cnn_mask_still_sums_to_one(rng):
    config = tiny_model_config(variant=ModelVariant.CNN, cnn=CnnConfig(layers=((3, 1), (2, 2)), channels=(2, 3)))
    params = init_params(config, 0)
    _, mask = cnn_baseline_forward(random_obs(rng, config, batch=5), params)
    assert mask.is_valid()


# ============================================================================
# Agent-friendly encoding and heads
# ============================================================================


def test_afe_zero_input_zero_biases_gives_zero_embedding(tiny_config):
    params = init_params(tiny_config, 0)
    embedding = afe_forward(Tensor(np.zeros((3, 2, 2))), params, tiny_config.afe)
    np.testing.assert_array_equal(embedding.data, np.zeros(3))


def test_afe_embedding_dimension():
    config = ModelConfig()
    params = init_params(config, 0)
    masked, _ = hue_forward(np.zeros((4, 40, 40)), params, config.hue)
    embedding = afe_forward(masked, params, config.afe)
    assert embedding.shape == (config.afe.width * 3 * 3,)
    assert embedding_dim(config) == 288


def test_afe_rejects_collapsed_grid(tiny_config):
    params = init_params(tiny_config, 0)
    too_big = AfeConfig(pool_kernel=3, pool_stride=1, blocks=1, width=3, adaptive_hw=(1, 1))
    with pytest.raises(ShapeError):
        afe_forward(Tensor(np.ones((3, 2, 2))), params, too_big)


def test_dueling_examples():
    np.testing.assert_allclose(dueling_combine(Tensor([1.0]), Tensor([2.0, 2.0])).data, [1.0, 1.0])
    np.testing.assert_allclose(dueling_combine(Tensor([0.0]), Tensor([1.0, 3.0])).data, [-1.0, 1.0])
    adv = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(
        dueling_combine(Tensor([0.5]), Tensor(adv + 7.0)).data, dueling_combine(Tensor([0.5]), Tensor(adv)).data
    )


def test_dueling_q_batched_shape(tiny_config, rng):
    params = init_params(tiny_config, 0)
    q = dueling_q(Tensor(rng.random((4, 3))), params, 3)
    assert q.shape == (4, 3)


def test_actor_critic_zero_weights_uniform_policy():
    config = tiny_model_config(head=HeadType.ACTOR_CRITIC)
    params = init_params(config, 0)
    for name in ("head.policy.weight", "head.value.weight"):
        params[name].data[:] = 0.0
    params["head.value.bias"].data[:] = 0.4
    logits, value = actor_critic_heads(Tensor(np.ones(3)), params, 3)
    np.testing.assert_allclose(softmax(logits).data, np.full(3, 1 / 3))
    assert value.item() == pytest.approx(0.4)
    np.testing.assert_allclose(softmax(logits.data + 5.0).data, softmax(logits).data)


@pytest.mark.parametrize("variant", ModelVariant.ALL)
def test_forward_all_variants(variant, rng):
    config = tiny_model_config(variant=variant, cnn=CnnConfig(layers=((3, 1), (2, 2)), channels=(2, 3)))
    params = init_params(config, 1)
    single = forward(params, random_obs(rng, config))
    batch = forward(params, random_obs(rng, config, batch=3))
    assert single.q.shape == (3,)
    assert batch.q.shape == (3, 3)
    again = forward(params, random_obs(np.random.default_rng(1234), config))
    first = forward(params, random_obs(np.random.default_rng(1234), config))
    np.testing.assert_array_equal(again.q.data, first.q.data)


# ============================================================================
# Gradients end to end
# ============================================================================


@pytest.mark.parametrize("seed", range(10))
def test_gradcheck_full_ife_dueling(seed):
    config = tiny_model_config(head_hidden=0)
    params = init_params(config, seed)
    assert params.count() <= 2000
    rng = np.random.default_rng(seed)
    obs = rng.random((2, 1, 8, 8))
    actions = [0, 2]
    target = rng.standard_normal(2)

    def loss():
        return huber_loss(select(forward(params, obs).q, actions), target)

    report = gradcheck(loss, params.tensors)
    assert report.ok, report


def test_policy_loss_reaches_attention_and_encoder(rng):
    config = tiny_model_config(head=HeadType.ACTOR_CRITIC, head_hidden=4)
    params = init_params(config, 2)
    obs = rng.random((3, 1, 8, 8))
    advantages = np.array([1.0, -0.5, 2.0])

    def loss():
        logits = forward(params, obs).logits
        logp = select(log_softmax(logits, axis=-1), [1, 0, 2])
        return mean(mul(logp, advantages))

    report = gradcheck(loss, params.tensors)
    assert report.ok, report

    params.zero_grad()
    with Tape() as tape:
        value = loss()
    tape.backward(value)
    for name in ("att.w1", "att.w2", "hue.conv0.weight", "afe.block0.conv1.weight"):
        assert params[name].grad is not None and np.any(params[name].grad != 0.0), name


def test_extract_features_hue_only_flattens(rng):
    config = tiny_model_config(variant=ModelVariant.HUE_ONLY)
    params = init_params(config, 0)
    embedding, mask = extract_features(random_obs(rng, config), params)
    assert embedding.shape == (embedding_dim(config),) == (3 * 2 * 2,)
    assert mask.weights.shape == (2, 2)
    assert tsum(embedding).item() == pytest.approx(float(np.sum(embedding.data)))


def test_hue_config_rejects_overlap():
    with pytest.raises(ConfigError):
        HueConfig(layers=((4, 2),), channels=(4,)).validate()
    CnnConfig(layers=((4, 2),), channels=(4,)).validate()
