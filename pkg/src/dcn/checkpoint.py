"""Binary checkpoint container.

Layout: 8 magic bytes, uint32 format version, uint64 header length, a
UTF-8 JSON header (configs, their sha256 digest, array index, history),
then the raw little-endian array bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .embedding import EmbeddingColumn, EmbeddingConfig
from .relation import RelationColumn, RelationConfig
from .training import TrainConfig, TrainedModel

MAGIC = b"DCNCKPT\n"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def model_config(model: TrainedModel) -> dict:
    return {
        "embedding": model.embed_config.to_dict(),
        "relation": model.rel_config.to_dict() if model.rel_config is not None else None,
        "train": model.train_config.to_dict() if model.train_config is not None else None,
    }


def _named_arrays(model: TrainedModel) -> dict[str, np.ndarray]:
    arrays = {"meta.channel_mean": np.asarray(model.channel_mean, dtype=np.float64)}
    for name, t in model.embedding.state_dict().items():
        arrays[f"embedding.{name}"] = t.detach().cpu().numpy()
    if model.relation is not None:
        for name, t in model.relation.state_dict().items():
            arrays[f"relation.{name}"] = t.detach().cpu().numpy()
    return arrays


def save_checkpoint(model: TrainedModel, path) -> None:
    config = model_config(model)
    index, blobs, offset = [], [], 0
    for name, arr in _named_arrays(model).items():
        arr = np.asarray(arr, order="C")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "config_digest": config_digest(config),
        "payload_digest": hashlib.sha256(payload).hexdigest(),
        "arrays": index,
        "history": model.history,
        "meta": model.meta,
    }
    head = canonical_json(header).encode()
    Path(path).write_bytes(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)) + head + payload)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Validated header and named arrays, without building any model."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    data = p.read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{p}: truncated checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{p}: not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{p}: format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(data[_PREFIX.size : _PREFIX.size + head_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{p}: corrupt header") from exc
    if config_digest(header["config"]) != header["config_digest"]:
        raise CheckpointError(f"{p}: config digest mismatch")
    payload = data[_PREFIX.size + head_len :]
    if hashlib.sha256(payload).hexdigest() != header["payload_digest"]:
        raise CheckpointError(f"{p}: corrupt parameter payload")
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(tuple(entry["shape"])).copy()
    return header, arrays


def _load_state(module: torch.nn.Module, prefix: str, arrays: dict[str, np.ndarray]) -> None:
    expected = module.state_dict()
    state = {}
    for name, ref in expected.items():
        key = prefix + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks array {key}")
        if tuple(arrays[key].shape) != tuple(ref.shape):
            raise CheckpointError(f"{key}: shape {arrays[key].shape} does not match config {tuple(ref.shape)}")
        state[name] = torch.from_numpy(arrays[key])
    extra = [k for k in arrays if k.startswith(prefix) and k[len(prefix):] not in expected]
    if extra:
        raise CheckpointError(f"checkpoint has arrays unknown to the config: {extra[:3]}")
    module.load_state_dict(state)


def load_checkpoint(path, expected_config: dict | None = None) -> TrainedModel:
    header, arrays = read_checkpoint(path)
    cfg = header["config"]
    if expected_config is not None and config_digest(expected_config) != header["config_digest"]:
        raise CheckpointError(f"{path}: checkpoint config differs from the expected config")
    emb_cfg = EmbeddingConfig(**cfg["embedding"])
    emb = EmbeddingColumn(emb_cfg)
    _load_state(emb, "embedding.", arrays)
    emb.eval()
    rel_cfg = rel = None
    if cfg["relation"] is not None:
        rel_cfg = RelationConfig(**cfg["relation"])
        rel = RelationColumn(rel_cfg, emb_cfg)
        _load_state(rel, "relation.", arrays)
        rel.eval()
    train_cfg = TrainConfig(**cfg["train"]) if cfg["train"] is not None else None
    return TrainedModel(emb, rel, emb_cfg, rel_cfg, train_cfg, arrays["meta.channel_mean"],
                        header["history"], header["meta"])
