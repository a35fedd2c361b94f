"""
Checkpoint container.

Layout:
  8 bytes   magic b"NMAPCKPT"
  4 bytes   little-endian uint32 manifest length
  n bytes   UTF-8 JSON manifest
  ...       raw little-endian arrays, in manifest order

The manifest lists {name, dtype, shape, offset} for every parameter and every
optimizer moving-average array (offsets relative to the start of the data
block), the optimizer step count, the env-step count, the run seed and the
resolved run config.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import ParameterStore, RMSProp
from .errors import CheckpointError

MAGIC = b"NMAPCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sI")


@dataclass
class Checkpoint:
    env_steps: int
    seed: int
    config: dict[str, Any]
    parameters: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_steps: int = 0


def checkpoint_name(env_steps: int) -> str:
    return f"ckpt_{env_steps}.nmck"


def _entries(arrays: dict[str, np.ndarray], start: int) -> tuple[list[dict[str, Any]], list[bytes], int]:
    entries: list[dict[str, Any]] = []
    blobs: list[bytes] = []
    offset = start
    for name, arr in arrays.items():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        blob = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(le.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    return entries, blobs, offset


def save_checkpoint(
    path: Path,
    params: ParameterStore,
    optimizer: RMSProp | None,
    env_steps: int,
    seed: int,
    config: dict[str, Any],
) -> Path:
    param_entries, param_blobs, end = _entries(params.snapshot(), 0)
    opt_arrays = dict(optimizer.square_avg) if optimizer is not None else {}
    opt_entries, opt_blobs, _ = _entries(opt_arrays, end)
    manifest = {
        "format": FORMAT_VERSION,
        "env_steps": int(env_steps),
        "seed": int(seed),
        "config": config,
        "parameters": param_entries,
        "optimizer": {
            "kind": "rmsprop",
            "steps": optimizer.steps if optimizer is not None else 0,
            "square_avg": opt_entries,
        },
    }
    body = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(_HEADER.pack(MAGIC, len(body)))
        f.write(body)
        for blob in param_blobs + opt_blobs:
            f.write(blob)
    return path


def _read_arrays(entries: list[dict[str, Any]], data: bytes, path: Path) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for entry in entries:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(int(d) for d in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = int(entry["offset"])
        stop = start + count * dtype.itemsize
        if stop > len(data):
            raise CheckpointError(f"{path}: array {entry['name']!r} runs past the end of the file", [entry["name"]])
        arrays[entry["name"]] = np.frombuffer(data[start:stop], dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return arrays


def load_checkpoint(path: Path) -> Checkpoint:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    magic, length = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    body_end = _HEADER.size + length
    try:
        manifest = json.loads(raw[_HEADER.size : body_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    data = raw[body_end:]
    optimizer = manifest.get("optimizer", {})
    return Checkpoint(
        env_steps=int(manifest["env_steps"]),
        seed=int(manifest["seed"]),
        config=manifest["config"],
        parameters=_read_arrays(manifest["parameters"], data, path),
        optimizer_state=_read_arrays(optimizer.get("square_avg", []), data, path),
        optimizer_steps=int(optimizer.get("steps", 0)),
    )


def manifest_mismatches(checkpoint: Checkpoint, params: ParameterStore) -> list[str]:
    """Names missing on either side or stored with a different shape."""
    offending: list[str] = []
    model_names = params.names()
    for name in model_names:
        stored = checkpoint.parameters.get(name)
        if stored is None or tuple(stored.shape) != params[name].shape:
            offending.append(name)
    offending.extend(name for name in checkpoint.parameters if name not in params)
    return offending


def restore(checkpoint: Checkpoint, params: ParameterStore, optimizer: RMSProp | None = None) -> None:
    offending = manifest_mismatches(checkpoint, params)
    if offending:
        raise CheckpointError(
            f"checkpoint does not match the model; offending parameters: {', '.join(offending)}",
            offending,
        )
    for name, arr in checkpoint.parameters.items():
        params.assign(name, arr)
    if optimizer is not None:
        optimizer.square_avg = {name: arr.astype(params[name].data.dtype) for name, arr in checkpoint.optimizer_state.items()}
        optimizer.steps = checkpoint.optimizer_steps
