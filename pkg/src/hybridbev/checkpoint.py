"""Named-parameter store with per-parameter frozen flags and JSON metadata.

File layout (little-endian)::

    magic  b"HBEVCKP1"
    u32    metadata length, then UTF-8 JSON (sorted keys)
    u32    parameter count
    per parameter, sorted by name:
        u32 name length, UTF-8 name, u8 frozen flag, tensor block

Tensor blocks use :func:`hybridbev.tensor.write_tensor`.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Set

import numpy as np

from . import tensor as T
from .params import Params

MAGIC = b"HBEVCKP1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: Params
    frozen: Set[str] = field(default_factory=set)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.frozen) - set(self.params)
        if unknown:
            raise CheckpointError(f"frozen names without parameters: {sorted(unknown)}")

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        meta = json.dumps(self.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf.write(struct.pack("<I", len(meta)))
        buf.write(meta)
        buf.write(struct.pack("<I", len(self.params)))
        for name in sorted(self.params):
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", 1 if name in self.frozen else 0))
            T.write_tensor(buf, self.params[name])
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        fh = io.BytesIO(data)
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        try:
            (n,) = struct.unpack("<I", fh.read(4))
            metadata = json.loads(fh.read(n).decode("utf-8"))
            (count,) = struct.unpack("<I", fh.read(4))
            params: Params = {}
            frozen = set()
            for _ in range(count):
                (ln,) = struct.unpack("<I", fh.read(4))
                name = fh.read(ln).decode("utf-8")
                (flag,) = struct.unpack("<B", fh.read(1))
                params[name] = T.read_tensor(fh)
                if flag:
                    frozen.add(name)
        except (struct.error, EOFError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
        if fh.read(1):
            raise CheckpointError("trailing bytes after the last parameter")
        return cls(params, frozen, metadata)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def params_digest(params: Params, names: Iterable[str] | None = None) -> str:
    """SHA-256 over names, shapes and raw bytes; equal digests mean bit-identical tensors."""
    h = hashlib.sha256()
    for name in sorted(params if names is None else names):
        x = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(struct.pack(f"<{x.ndim}I", *x.shape))
        h.update(x.tobytes())
    return h.hexdigest()
