"""Checkpoint container for :class:`ModelParams`.

Layout: magic ``b"GLYCKPT1"``, a little-endian uint64 manifest length, the
UTF-8 JSON manifest (format version, config, scaler, trained flag, metadata
and a ``name -> {offset, shape}`` table sorted by name), then the parameter
arrays as contiguous little-endian float64 blocks.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..preprocess import ScalerParams
from .config import ModelConfig
from .model import ModelParams

MAGIC = b"GLYCKPT1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams) -> None:
    table, payload = {}, bytearray()
    for name in sorted(params.arrays):
        data = np.ascontiguousarray(params.arrays[name], dtype="<f8")
        table[name] = {"offset": len(payload), "shape": list(data.shape)}
        payload += data.tobytes()
    manifest = {
        "format": "glyco-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_json(),
        "scaler": params.scaler.to_json(),
        "trained": params.trained,
        "meta": params.meta,
        "tensors": table,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(head)) + head + bytes(payload))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a glyco checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')} is not supported "
                              f"(expected {CHECKPOINT_VERSION})")
    body = memoryview(raw)[16 + n:]
    arrays = {}
    for name, spec in manifest["tensors"].items():
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        if spec["offset"] + 8 * count > len(body):
            raise CheckpointError(f"tensor {name} runs past the end of the file")
        arrays[name] = np.frombuffer(body, dtype="<f8", count=count,
                                     offset=spec["offset"]).reshape(shape).astype(float)
    return ModelParams(arrays, ScalerParams.from_json(manifest["scaler"]),
                       ModelConfig.from_json(manifest["config"]), bool(manifest["trained"]),
                       manifest.get("meta", {}))
