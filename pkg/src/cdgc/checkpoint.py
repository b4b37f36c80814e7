"""Self-describing checkpoint container shared by context models and classifiers.

Layout (all integers little-endian)::

    magic        8 bytes   b"CDGCCKPT"
    version      u16
    config_hash  32 bytes  sha256 of the canonical config JSON
    header_len   u32
    header       JSON: kind, config, metadata, tensor table (name/dtype/shape/nbytes)
    payload      tensors in table order, raw little-endian (float32 or int64)
    crc32        u32 over every preceding byte

The whole file is parsed and validated before any model is constructed, so a
failed load never yields a partially initialized model.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

MAGIC = b"CDGCCKPT"
VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.int64: "<i8"}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}

# kind -> callable(config_dict) -> nn.Module
_BUILDERS: dict[str, Callable] = {}


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match what the caller expects."""


def register_kind(kind: str, builder: Callable) -> None:
    _BUILDERS[kind] = builder


def config_hash(config: dict) -> bytes:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).digest()


@dataclass
class Checkpoint:
    kind: str
    config: dict
    state: dict
    metadata: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> bytes:
        return config_hash(self.config)


def write_checkpoint(ckpt: Checkpoint, path) -> Path:
    table, blobs = [], []
    for name, tensor in ckpt.state.items():
        tensor = tensor.detach().cpu()
        if tensor.dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {tensor.dtype}")
        code = _DTYPES[tensor.dtype]
        blob = np.ascontiguousarray(tensor.numpy(), dtype=code).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(tensor.shape),
                      "nbytes": len(blob)})
        blobs.append(blob)
    header = json.dumps({"kind": ckpt.kind, "config": ckpt.config,
                         "metadata": ckpt.metadata, "tensors": table},
                        sort_keys=True).encode("utf-8")
    body = b"".join([MAGIC, struct.pack("<H", VERSION), ckpt.config_hash,
                     struct.pack("<I", len(header)), header, *blobs])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)
    return path


def read_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    fixed = len(MAGIC) + 2 + 32 + 4
    if len(data) < fixed + 4 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted file)")
    (version,) = struct.unpack_from("<H", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    stored_hash = body[len(MAGIC) + 2:len(MAGIC) + 34]
    (header_len,) = struct.unpack_from("<I", body, len(MAGIC) + 34)
    try:
        header = json.loads(body[fixed:fixed + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    if config_hash(header["config"]) != stored_hash:
        raise CheckpointError(f"{path}: config hash does not match stored config")

    state, offset = {}, fixed + header_len
    for entry in header["tensors"]:
        code, shape, nbytes = entry["dtype"], entry["shape"], entry["nbytes"]
        if code not in _TORCH_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype {code!r}")
        arr = np.frombuffer(body, dtype=code, count=int(np.prod(shape, dtype=np.int64)),
                            offset=offset)
        if arr.nbytes != nbytes:
            raise CheckpointError(f"{path}: tensor {entry['name']!r} size mismatch")
        state[entry["name"]] = torch.from_numpy(arr.reshape(shape).copy())
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    return Checkpoint(header["kind"], header["config"], state, header["metadata"])


def save_checkpoint(model, path, metadata: Optional[dict] = None) -> Path:
    """Write ``model`` (which must expose ``kind`` and ``config``) to ``path``."""
    ckpt = Checkpoint(model.kind, model.config.to_dict(), dict(model.state_dict()),
                      dict(metadata or {}))
    return write_checkpoint(ckpt, path)


def load_checkpoint(path, expected_config=None, expected_kind: Optional[str] = None):
    """Rebuild the model stored at ``path``.

    ``expected_config`` (a config object or dict) is compared by hash; a
    mismatch raises :class:`CheckpointError`. The checkpoint metadata is
    attached to the returned model as ``checkpoint_metadata``.
    """
    from . import classifiers  # noqa: F401  registers the model kinds

    ckpt = read_checkpoint(path)
    if expected_kind is not None and ckpt.kind != expected_kind:
        raise CheckpointError(f"{path}: holds a {ckpt.kind!r}, expected {expected_kind!r}")
    if expected_config is not None:
        expected = expected_config if isinstance(expected_config, dict) else expected_config.to_dict()
        if config_hash(expected) != ckpt.config_hash:
            raise CheckpointError(f"{path}: config hash mismatch")
    if ckpt.kind not in _BUILDERS:
        raise CheckpointError(f"{path}: no builder registered for kind {ckpt.kind!r}")
    model = _BUILDERS[ckpt.kind](ckpt.config)
    try:
        model.load_state_dict(ckpt.state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: state does not fit the rebuilt model") from exc
    model.checkpoint_metadata = ckpt.metadata
    return model
