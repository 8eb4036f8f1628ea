"""Versioned binary checkpoints with content hashes.

Layout, in order:

    magic  b"SGIFTCK1"
    u32 little-endian: byte length of the meta JSON
    meta JSON (UTF-8, sorted keys): {"version", "stage_tag", "rng",
        "branches": {group id: projector config dict}}
    for each branch in sorted group-id order:
        W1, b1 (if bias), W2, b2 (if bias) as raw little-endian float64
    sha256 digest (32 bytes) of every preceding byte

The trailing digest doubles as the checkpoint's content hash: two runs that
produce identical parameters and meta produce identical files and hashes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import IncompatibleCheckpoints
from .projector import ProjectorConfig, ProjectorParams

MAGIC = b"SGIFTCK1"
VERSION = 1

PARAM_GROUPS = ("proj_semantic", "proj_paralinguistic")


@dataclass
class Checkpoint:
    stage_tag: str
    branches: dict[str, tuple[ProjectorConfig, ProjectorParams]]
    rng: dict | None = None
    version: int = VERSION

    def param_bytes(self, group: str) -> bytes:
        config, params = self.branches[group]
        parts = [np.ascontiguousarray(params.W1, dtype="<f8").tobytes()]
        if config.bias:
            parts.append(np.ascontiguousarray(params.b1, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(params.W2, dtype="<f8").tobytes())
        if config.bias:
            parts.append(np.ascontiguousarray(params.b2, dtype="<f8").tobytes())
        return b"".join(parts)


def _encode(ckpt: Checkpoint) -> bytes:
    meta = {
        "version": ckpt.version,
        "stage_tag": ckpt.stage_tag,
        "rng": ckpt.rng,
        "branches": {g: asdict(cfg) for g, (cfg, _) in sorted(ckpt.branches.items())},
    }
    meta_bytes = json.dumps(meta, sort_keys=True, ensure_ascii=False).encode("utf-8")
    body = [MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes]
    for group in sorted(ckpt.branches):
        body.append(ckpt.param_bytes(group))
    blob = b"".join(body)
    return blob + hashlib.sha256(blob).digest()


def checkpoint_hash(ckpt: Checkpoint) -> str:
    return _encode(ckpt)[-32:].hex()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> str:
    """Write the checkpoint; returns its content hash (hex)."""
    data = _encode(ckpt)
    Path(path).write_bytes(data)
    return data[-32:].hex()


def load_checkpoint(path: str | Path) -> tuple[Checkpoint, str]:
    """Read and verify a checkpoint; returns (checkpoint, content hash)."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 + 32 or not data.startswith(MAGIC):
        raise IncompatibleCheckpoints(f"{path}: not a checkpoint file")
    blob, digest = data[:-32], data[-32:]
    if hashlib.sha256(blob).digest() != digest:
        raise IncompatibleCheckpoints(f"{path}: content hash mismatch")
    (meta_len,) = struct.unpack("<I", blob[len(MAGIC) : len(MAGIC) + 4])
    meta_start = len(MAGIC) + 4
    meta = json.loads(blob[meta_start : meta_start + meta_len].decode("utf-8"))
    if meta.get("version") != VERSION:
        raise IncompatibleCheckpoints(f"unsupported checkpoint version {meta.get('version')!r}")
    offset = meta_start + meta_len
    branches: dict[str, tuple[ProjectorConfig, ProjectorParams]] = {}
    for group in sorted(meta["branches"]):
        config = ProjectorConfig(**meta["branches"][group])
        shapes = [(config.group * config.d_enc, config.d_hidden)]
        if config.bias:
            shapes.append((config.d_hidden,))
        shapes.append((config.d_hidden, config.d_llm))
        if config.bias:
            shapes.append((config.d_llm,))
        arrays = []
        for shape in shapes:
            n = int(np.prod(shape)) * 8
            if len(blob) - offset < n:
                raise IncompatibleCheckpoints(f"{path}: truncated parameter payload")
            arrays.append(np.frombuffer(blob[offset : offset + n], dtype="<f8").reshape(shape).copy())
            offset += n
        if config.bias:
            params = ProjectorParams(W1=arrays[0], b1=arrays[1], W2=arrays[2], b2=arrays[3])
        else:
            params = ProjectorParams(W1=arrays[0], b1=None, W2=arrays[1], b2=None)
        branches[group] = (config, params)
    if offset != len(blob):
        raise IncompatibleCheckpoints(f"{path}: trailing bytes after parameters")
    ckpt = Checkpoint(
        stage_tag=meta["stage_tag"], branches=branches, rng=meta["rng"], version=meta["version"]
    )
    return ckpt, digest.hex()


def group_hash(ckpt: Checkpoint, group: str) -> str:
    """Hash of one branch's parameters alone, for freeze comparisons."""
    if group not in ckpt.branches:
        raise IncompatibleCheckpoints(f"checkpoint has no group {group!r}")
    return hashlib.sha256(ckpt.param_bytes(group)).hexdigest()
