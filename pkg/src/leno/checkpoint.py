"""Binary model checkpoints.

Layout, all integers little-endian::

    b"LENO1"                      magic
    u16                           format version
    u32 + bytes                   UTF-8 JSON header (model config and seed)
    u32                           tensor count
    per tensor:
        u16 + bytes               UTF-8 name
        u8                        ndim
        u32 * ndim                dims
        f32 * prod(dims)          row-major values
    u32                           CRC32 of every byte after the version field
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError, CRCError, MagicError, ShapeError
from .sodnet import ModelConfig, SodModel, build_model

MAGIC = b"LENO1"
VERSION = 1
_PREFIX = len(MAGIC) + 2


def _header(model: SodModel) -> dict:
    return {"model": model.config.to_dict(), "seed": model.seed}


def checkpoint_bytes(model: SodModel) -> bytes:
    state = model.state()
    if len(set(state)) != len(state):
        raise CheckpointError("tensor names must be unique")
    header = json.dumps(_header(model), sort_keys=True).encode()
    body = [struct.pack("<I", len(header)), header, struct.pack("<I", len(state))]
    for name, t in state.items():
        raw = name.encode()
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        body.append(struct.pack("<H", len(raw)) + raw)
        body.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.append(arr.tobytes())
    payload = b"".join(body)
    return MAGIC + struct.pack("<H", VERSION) + payload + struct.pack("<I", zlib.crc32(payload))


def model_checksum(model: SodModel) -> str:
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()


def save_checkpoint(model: SodModel, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(checkpoint_bytes(model))


def _parse(blob: bytes) -> tuple[dict, dict]:
    if blob[: len(MAGIC)] != MAGIC:
        raise MagicError(f"bad magic {blob[:len(MAGIC)]!r}, expected {MAGIC!r}")
    if len(blob) < _PREFIX + 4:
        raise CRCError("checkpoint truncated before the checksum")
    (version,) = struct.unpack_from("<H", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    payload, (crc,) = blob[_PREFIX:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CRCError("checkpoint CRC32 mismatch (file corrupted or truncated)")
    try:
        pos = 0
        (hlen,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        header = json.loads(payload[pos : pos + hlen])
        pos += hlen
        (count,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", payload, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", payload, pos)
            pos += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            tensors[name] = np.frombuffer(payload, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
        if pos != len(payload):
            raise CheckpointError("trailing bytes after the last tensor")
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint body: {exc}") from exc
    return header, tensors


def _shape_diff(expected: dict, found: dict) -> list[str]:
    problems = []
    for name, shape in expected.items():
        if name not in found:
            problems.append(f"missing {name} {shape}")
        elif found[name] != shape:
            problems.append(f"{name}: checkpoint {found[name]} vs model {shape}")
    problems += [f"unexpected {name} {shape}" for name, shape in found.items() if name not in expected]
    return problems


def load_checkpoint(path, model: SodModel | None = None) -> SodModel:
    """Load a checkpoint, building the architecture from its header unless ``model`` is given.

    When loading into an existing model, the shape tables must match exactly.
    """
    blob = Path(path).read_bytes()
    header, tensors = _parse(blob)
    if model is None:
        model = build_model(ModelConfig.from_dict(header["model"]), seed=header.get("seed", 0))
    state = model.state()
    problems = _shape_diff({k: t.shape for k, t in state.items()}, {k: a.shape for k, a in tensors.items()})
    if problems:
        raise ShapeError("checkpoint does not fit the target architecture: " + "; ".join(problems))
    for name, t in state.items():
        t.data = tensors[name].astype(model.dtype)
        t.grad = None
    return model
