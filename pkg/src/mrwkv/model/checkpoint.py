"""Versioned binary checkpoints.

Layout: magic, version, header length, JSON header, then raw tensor
data in header order. The header carries the artifact kind (model,
state, or lora), the model config, and per-tensor name/dtype/shape.
Tuned initial states and adapters are small separate files so they can
be shipped without the base weights.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .config import ModelConfig
from .lora import LoraAdapter, apply_lora
from .rwkv7 import RWKV7, InitialState

_MAGIC = b"MRCK"
_VERSION = 1
_HEADER = struct.Struct("<4sHI")
_DTYPES = {"f32": "<f4", "f64": "<f8"}


class CheckpointError(Exception):
    pass


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def save_tensors(
    path: str | Path, kind: str, config: dict, tensors: dict[str, Tensor]
) -> None:
    entries = []
    blobs = []
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().numpy()
        code = _dtype_code(arr)
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr).astype(_DTYPES[code], copy=False).tobytes())
    header = json.dumps(
        {"kind": kind, "config": config, "tensors": entries}, sort_keys=True
    ).encode()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_tensors(path: str | Path) -> tuple[str, dict, dict[str, Tensor]]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, header_len = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(data) < _HEADER.size + header_len:
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(data[_HEADER.size : _HEADER.size + header_len])
    offset = _HEADER.size + header_len
    tensors: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        np_dtype = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * np_dtype.itemsize
        if offset + nbytes > len(data):
            raise CheckpointError(f"truncated tensor data for {entry['name']}")
        arr = np.frombuffer(data, dtype=np_dtype, count=count, offset=offset)
        tensors[entry["name"]] = torch.from_numpy(
            arr.reshape(entry["shape"]).copy()
        )
        offset += nbytes
    if offset != len(data):
        raise CheckpointError("trailing bytes after tensor data")
    return header["kind"], header["config"], tensors


def _expect_kind(kind: str, want: str) -> None:
    if kind != want:
        raise CheckpointError(f"expected a {want} checkpoint, found {kind}")


def save_model(path: str | Path, model: RWKV7) -> None:
    save_tensors(path, "model", model.cfg.to_json_dict(), dict(model.state_dict()))


def load_model(path: str | Path, *, dtype: torch.dtype | None = None) -> RWKV7:
    kind, config, tensors = load_tensors(path)
    _expect_kind(kind, "model")
    cfg = ModelConfig.from_json_dict(config)
    model = RWKV7(cfg, dtype=tensors["emb.weight"].dtype)
    try:
        model.load_state_dict(tensors)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint does not match the model: {e}") from e
    return model.to(dtype) if dtype is not None else model


def save_initial_state(path: str | Path, state: InitialState) -> None:
    config = state.cfg.to_json_dict()
    config["tune_shift"] = state.tune_shift
    save_tensors(path, "state", config, dict(state.state_dict()))


def load_initial_state(
    path: str | Path, *, dtype: torch.dtype | None = None
) -> InitialState:
    kind, config, tensors = load_tensors(path)
    _expect_kind(kind, "state")
    tune_shift = bool(config.pop("tune_shift", False))
    cfg = ModelConfig.from_json_dict(config)
    state = InitialState(cfg, tune_shift=tune_shift, dtype=tensors["wkv"].dtype)
    try:
        state.load_state_dict(tensors)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint does not match the state shape: {e}") from e
    return state.to(dtype) if dtype is not None else state


def save_lora(path: str | Path, adapter: LoraAdapter, cfg: ModelConfig) -> None:
    config = cfg.to_json_dict()
    config["rank"] = adapter.rank
    config["alpha"] = adapter.alpha
    save_tensors(path, "lora", config, adapter.tensors())


def load_lora(path: str | Path, model: RWKV7) -> LoraAdapter:
    """Attach the stored adapter to a model built from the same config."""
    kind, config, tensors = load_tensors(path)
    _expect_kind(kind, "lora")
    rank = int(config.pop("rank"))
    alpha = float(config.pop("alpha"))
    cfg = ModelConfig.from_json_dict(config)
    if cfg != model.cfg:
        raise CheckpointError("adapter was trained for a different model config")
    adapter = apply_lora(model, rank, alpha)
    dtype = model.dtype
    adapter.load_tensors({k: v.to(dtype) for k, v in tensors.items()})
    return adapter
