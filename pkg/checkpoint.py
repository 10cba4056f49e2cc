"""
Checkpoint Format ("IFE1")

Layout on disk:

    b"IFE1"                      4 bytes magic
    header length                uint32, little-endian
    header                       UTF-8 JSON, sorted keys
    parameter blobs              little-endian float32, in manifest order

The header carries the model config, its fingerprint, the parameter manifest
(name, shape, byte offset into the blob section) and a free-form ``extra``
object (env config, hyperparameters, frame counter). Parameters are trained in
float64 and stored as float32; loading widens them back to float64, so a
save -> load -> save cycle is bit-stable but the first save rounds.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from ife_net import ModelParams, fingerprint, param_layout
from models import CheckpointError, ModelConfig
from tensor_core import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"IFE1"
FORMAT_VERSION = 1
_LEN = struct.Struct("<I")


@dataclass
class Checkpoint:
    params: ModelParams
    extra: Dict = field(default_factory=dict)


def encode_checkpoint(params: ModelParams, extra: Optional[Dict] = None) -> bytes:
    manifest = []
    blobs = []
    offset = 0
    for name, tensor in params.items():
        blob = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": FORMAT_VERSION,
        "model": params.config.to_dict(),
        "fingerprint": params.fingerprint,
        "params": manifest,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(header_bytes)) + header_bytes + b"".join(blobs)


def _check_manifest(entries, config: ModelConfig, source: str) -> List[Dict]:
    """The manifest must list exactly the config's parameters, in layout order."""
    if not isinstance(entries, list):
        raise CheckpointError(f"{source}: header has no parameter manifest")
    try:
        found = [(str(e["name"]), tuple(int(d) for d in e["shape"]), int(e["offset"])) for e in entries]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{source}: malformed manifest entry ({exc})") from exc

    layout = [(name, shape) for name, shape, _gain in param_layout(config)]
    for i, (want, got) in enumerate(zip(layout, found)):
        if want != got[:2]:
            raise CheckpointError(
                f"{source}: manifest entry {i} is {got[0]} {got[1]}, config expects {want[0]} {want[1]}"
            )
    if len(found) != len(layout):
        raise CheckpointError(f"{source}: manifest lists {len(found)} parameters, config expects {len(layout)}")
    return entries


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{source}: not an IFE1 checkpoint (bad magic {raw[:4]!r})")
    if len(raw) < 8:
        raise CheckpointError(f"{source}: truncated header length")
    (header_len,) = _LEN.unpack_from(raw, 4)
    start = 8 + header_len
    if len(raw) < start:
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(raw[8:start].decode("utf-8"))
        config = ModelConfig.from_dict(header["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{source}: malformed header ({exc})") from exc

    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {header.get('version')}")
    expected = fingerprint(config)
    if header.get("fingerprint") != expected:
        raise CheckpointError(
            f"{source}: fingerprint {header.get('fingerprint')} does not match config ({expected})"
        )

    entries = _check_manifest(header.get("params"), config, source)

    blob = memoryview(raw)[start:]
    tensors: Dict[str, Tensor] = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        offset = int(entry["offset"])
        if offset + 4 * count > len(blob):
            raise CheckpointError(f"{source}: parameter {entry['name']} runs past end of file")
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        tensors[entry["name"]] = Tensor(
            values.astype(np.float64).reshape(shape), requires_grad=True, name=entry["name"]
        )
    return Checkpoint(ModelParams(config, tensors, expected), header.get("extra", {}))


def save_checkpoint(path: Union[str, Path], params: ModelParams, extra: Optional[Dict] = None) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(params, extra))
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot write checkpoint ({exc})") from exc
    logger.info("checkpoint written to %s", path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    return decode_checkpoint(raw, str(path))
