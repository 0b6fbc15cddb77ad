"""Binary checkpoint container: canonical-JSON config plus named float64 tensors.

Layout (all integers little-endian):

    magic  b"MUDAIF01"
    u32    config length, then canonical JSON (UTF-8)
    u32    tensor count
    per tensor:
        u16 name length, name (UTF-8)
        u8  rank, u32 per-axis extent
        little-endian float64 payload, row-major

The round-trip is byte-exact: loading and re-saving a checkpoint reproduces
the identical file.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams


MAGIC = b"MUDAIF01"


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def save(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += MAGIC
    cfg = canonical_json(config).encode()
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        encoded = name.encode()
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        for extent in arr.shape:
            blob += struct.pack("<I", extent)
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (cfg_len,) = struct.unpack("<I", take(4))
    config = json.loads(take(cfg_len).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (rank,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(n * 8), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = data
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return config, tensors


def save_model(path, config: ModelConfig, params: ModelParams, vocab_tokens: list[str],
               extra: dict | None = None) -> None:
    cfg = {"model": config.to_dict(), "vocab": list(vocab_tokens)}
    if extra:
        cfg.update(extra)
    save(path, cfg, {name: t.data for name, t in params.named().items()})


def load_model(path) -> tuple[ModelConfig, ModelParams, list[str], dict]:
    from .model import init_params

    cfg, tensors = load(path)
    if "model" not in cfg or "vocab" not in cfg:
        raise CheckpointError(f"{path}: config section missing model/vocab entries")
    config = ModelConfig.from_dict(cfg["model"])
    params = init_params(config, seed=0)
    named = params.named()
    if set(named) != set(tensors):
        missing = sorted(set(named) ^ set(tensors))
        raise CheckpointError(f"{path}: parameter names disagree with config: {missing[:4]}")
    for name, t in named.items():
        if tensors[name].shape != t.data.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {tensors[name].shape}, config implies {t.data.shape}")
        t.data = tensors[name]
    return config, params, list(cfg["vocab"]), cfg
