"""
Binary checkpoint container.

Layout (little-endian): magic "DFCK", u32 version, u32 spec digest, u32 tensor
count, then per tensor u32 name length, UTF-8 name, u32 rank, u32 dims[rank],
float32 values; finally u64 metadata length and UTF-8 JSON metadata.
"""

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from app.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"DFCK"
FORMAT_VERSION = 1
_TENSOR_CRC_KEY = "tensor_crc32"


@dataclass
class Checkpoint:
    """
    Named float32 tensors plus JSON metadata, tied to a model spec by digest.

    Attributes:
        spec_digest: CRC32 of the canonical model spec.
        tensors: Parameter arrays by name, stored as float32.
        metadata: JSON-compatible training metadata (spec, config, metrics, epoch).
        version: Container format version.
    """

    spec_digest: int
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def preset(self) -> Optional[str]:
        return self.metadata.get("preset")

    @property
    def report(self) -> Optional[Dict[str, Any]]:
        return self.metadata.get("report")

    def require_digest(self, digest: int, preset: str) -> None:
        if self.spec_digest != digest:
            raise CheckpointError(
                f"spec digest mismatch: checkpoint built for preset {self.preset!r} "
                f"(digest {self.spec_digest:08x}), expected preset {preset!r} (digest {digest:08x})"
            )

    def to_bytes(self) -> bytes:
        payload = bytearray()
        payload += MAGIC
        payload += struct.pack("<III", self.version, self.spec_digest, len(self.tensors))
        crc = 0
        for name, array in self.tensors.items():
            encoded = name.encode("utf-8")
            values = np.ascontiguousarray(array, dtype="<f4")
            payload += struct.pack("<I", len(encoded)) + encoded
            payload += struct.pack("<I", values.ndim)
            payload += struct.pack(f"<{values.ndim}I", *values.shape)
            raw = values.tobytes()
            crc = zlib.crc32(raw, crc)
            payload += raw
        meta = dict(self.metadata)
        meta[_TENSOR_CRC_KEY] = crc
        text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        payload += struct.pack("<Q", len(text)) + text
        return bytes(payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        reader = _Reader(data)
        if reader.take(4) != MAGIC:
            raise CheckpointError("bad checkpoint magic at byte offset 0")
        version, digest, count = reader.unpack("<III")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")

        tensors: Dict[str, np.ndarray] = {}
        crc = 0
        for _ in range(count):
            (name_len,) = reader.unpack("<I")
            name_offset = reader.offset
            try:
                name = reader.take(name_len).decode("utf-8")
            except UnicodeDecodeError as e:
                raise CheckpointError(f"tensor name at byte offset {name_offset} is not valid UTF-8: {e.reason}") from e
            (rank,) = reader.unpack("<I")
            dims = reader.unpack(f"<{rank}I") if rank else ()
            raw = reader.take(4 * int(np.prod(dims, dtype=np.int64)))
            crc = zlib.crc32(raw, crc)
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()

        (meta_len,) = reader.unpack("<Q")
        try:
            metadata = json.loads(reader.take(meta_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint metadata: {e}") from e
        if not isinstance(metadata, dict):
            raise CheckpointError(f"checkpoint metadata must be a JSON object, got {type(metadata).__name__}")
        if reader.remaining:
            raise CheckpointError(f"{reader.remaining} trailing bytes after checkpoint metadata")
        stored_crc = metadata.pop(_TENSOR_CRC_KEY, None)
        if stored_crc != crc:
            raise CheckpointError(f"tensor digest mismatch: stored {stored_crc}, computed {crc}")
        return cls(spec_digest=digest, tensors=tensors, metadata=metadata, version=version)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def take(self, n: int) -> bytes:
        if n > self.remaining:
            raise CheckpointError(f"checkpoint truncated at byte offset {self.offset}: need {n} bytes, {self.remaining} left")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_bytes(checkpoint.to_bytes())
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint {path} ({len(checkpoint.tensors)} tensors)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return Checkpoint.from_bytes(data)
