"""
Tests for the IFE1 checkpoint format.
"""

import json
import struct

import numpy as np
import pytest

from checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from conftest import tiny_model_config
from ife_net import forward, init_params
from models import CheckpointError, HeadType, ModelVariant


def _rewrite_header(raw, change):
    (length,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8 : 8 + length])
    change(header)
    body = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(body)) + body + raw[8 + length :]


def test_save_load_restores_float32_values(tmp_path, tiny_config):
    params = init_params(tiny_config, 5)
    path = save_checkpoint(tmp_path / "ckpt" / "model.ife", params, {"frame": 42})
    loaded = load_checkpoint(path)
    assert loaded.extra == {"frame": 42}
    assert loaded.params.config == tiny_config
    assert list(loaded.params.keys()) == list(params.keys())
    for name, tensor in params.items():
        expected = tensor.data.astype(np.float32)
        np.testing.assert_array_equal(loaded.params[name].data.astype(np.float32), expected)


def test_second_save_is_byte_identical(tmp_path, tiny_config):
    params = init_params(tiny_config, 5)
    first = encode_checkpoint(params)
    again = encode_checkpoint(decode_checkpoint(first).params)
    assert first == again


@pytest.mark.parametrize("head", HeadType.ALL)
@pytest.mark.parametrize("variant", ModelVariant.ALL)
def test_round_trip_preserves_outputs(rng, head, variant):
    config = tiny_model_config(head=head, variant=variant)
    for seed in range(4):
        params = decode_checkpoint(encode_checkpoint(init_params(config, seed))).params
        reloaded = decode_checkpoint(encode_checkpoint(params)).params
        obs = rng.random((2, 1, 8, 8))
        a, b = forward(params, obs), forward(reloaded, obs)
        out_a = a.q if a.q is not None else a.logits
        out_b = b.q if b.q is not None else b.logits
        np.testing.assert_array_equal(out_a.data, out_b.data)
        np.testing.assert_array_equal(a.mask.weights, b.mask.weights)


def test_bad_magic(tiny_config):
    raw = encode_checkpoint(init_params(tiny_config, 0))
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXX" + raw[4:])


@pytest.mark.parametrize("cut", [6, 30, -1])
def test_truncated_file(tiny_config, cut):
    raw = encode_checkpoint(init_params(tiny_config, 0))
    with pytest.raises(CheckpointError):
        decode_checkpoint(raw[:cut])


def test_fingerprint_mismatch(tiny_config):
    raw = encode_checkpoint(init_params(tiny_config, 0))

    def tamper(header):
        header["model"]["head_hidden"] = 7

    with pytest.raises(CheckpointError, match="fingerprint"):
        decode_checkpoint(_rewrite_header(raw, tamper))


def test_unsupported_version(tiny_config):
    raw = encode_checkpoint(init_params(tiny_config, 0))

    def bump(header):
        header["version"] = 99

    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(_rewrite_header(raw, bump))


def _rename_first(header):
    header["params"][0]["name"] = "hue.conv9.weight"


def _reshape_first(header):
    header["params"][0]["shape"] = [1, 1, 2, 2]


def _drop_last(header):
    header["params"].pop()


def _no_manifest(header):
    del header["params"]


@pytest.mark.parametrize(
    "edit,message",
    [
        (_rename_first, "manifest entry 0 is hue.conv9.weight"),
        (_reshape_first, r"config expects hue.conv0.weight \(2, 1, 2, 2\)"),
        (_drop_last, "manifest lists"),
        (_no_manifest, "no parameter manifest"),
    ],
)
def test_manifest_must_match_config_layout(tiny_config, edit, message):
    raw = encode_checkpoint(init_params(tiny_config, 0))
    with pytest.raises(CheckpointError, match=message):
        decode_checkpoint(_rewrite_header(raw, edit))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ife")
