"""Single-file checkpoints: header JSON + named-tensor container + SHA-256 trailer."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import dump_named_tensors, load_named_tensors

FORMAT_VERSION = 1
_MAGIC = b"ILCK"


class CheckpointError(RuntimeError):
    pass


class CheckpointCorruptError(CheckpointError):
    """Truncated file or integrity-hash mismatch."""


class CheckpointVersionError(CheckpointError):
    """File written by another format version; needs migration."""


@dataclass
class Checkpoint:
    config_digest: str
    step: int
    tensors: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        header = json.dumps({"version": self.version, "config_digest": self.config_digest,
                             "step": self.step, "meta": self.meta}, sort_keys=True).encode()
        body = dump_named_tensors(self.tensors)
        payload = _MAGIC + struct.pack("<II", self.version, len(header)) + header + body
        return payload + hashlib.sha256(payload).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < 12 + 32 or blob[:4] != _MAGIC:
            raise CheckpointCorruptError("not a checkpoint or truncated header")
        payload, digest = blob[:-32], blob[-32:]
        if hashlib.sha256(payload).digest() != digest:
            raise CheckpointCorruptError("integrity hash mismatch (corrupt or truncated file)")
        version, hlen = struct.unpack_from("<II", payload, 4)
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(f"checkpoint format v{version}, this build reads v{FORMAT_VERSION}; migration needed")
        header = json.loads(payload[12:12 + hlen])
        tensors = load_named_tensors(payload[12 + hlen:])
        return cls(header["config_digest"], int(header["step"]), tensors, header["meta"], version)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
