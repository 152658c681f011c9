"""Binary checkpoint container.

Layout (little-endian)::

    b"DSNT"  u32 version
    u32 metadata length, metadata bytes (UTF-8 "key=value" lines)
    per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, raw f32 data

The metadata always carries ``tensor_count`` so a file cut at a record
boundary is still detected as truncated.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DSNT"
VERSION = 1


class CheckpointError(Exception):
    pass


class FormatError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    metadata: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    @property
    def kind(self) -> str:
        return self.metadata.get("kind", "")

    def to_bytes(self) -> bytes:
        meta = dict(self.metadata)
        meta["tensor_count"] = str(len(self.tensors))
        for k, v in meta.items():
            if "\n" in k or "=" in k or "\n" in str(v):
                raise ValueError(f"metadata entry {k!r} cannot be encoded")
        meta_bytes = "".join(f"{k}={v}\n" for k, v in meta.items()).encode()
        parts = [MAGIC, struct.pack("<I", self.version), struct.pack("<I", len(meta_bytes)), meta_bytes]
        for name, arr in self.tensors.items():
            raw_name = name.encode()
            arr = np.ascontiguousarray(arr, dtype="<f4")
            parts.append(struct.pack("<H", len(raw_name)) + raw_name)
            parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if len(buf) < 4 or buf[:4] != MAGIC:
            raise FormatError("not a checkpoint file (bad magic)")
        pos = 4

        def take(n):
            nonlocal pos
            if pos + n > len(buf):
                raise TruncatedCheckpointError(f"checkpoint truncated at byte {pos}")
            chunk = buf[pos:pos + n]
            pos += n
            return chunk

        (version,) = struct.unpack("<I", take(4))
        if version != VERSION:
            raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
        (mlen,) = struct.unpack("<I", take(4))
        meta = {}
        for line in take(mlen).decode().splitlines():
            k, _, v = line.partition("=")
            meta[k] = v
        count = int(meta.pop("tensor_count", "-1"))
        tensors = {}
        while pos < len(buf):
            (nlen,) = struct.unpack("<H", take(2))
            name = take(nlen).decode()
            (rank,) = struct.unpack("<B", take(1))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            n = int(np.prod(dims, dtype=np.int64))
            data = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
            tensors[name] = data
        if count >= 0 and len(tensors) != count:
            raise TruncatedCheckpointError(f"checkpoint holds {len(tensors)} of {count} tensors")
        return cls(meta, tensors, version)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def tensor_hash(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
    return h.hexdigest()
