"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PAMNCKPT"            magic
    u32                     format version
    u32 + bytes             model config, JSON (sorted keys)
    u32 + bytes             training metadata, JSON (sorted keys)
    u32                     tensor count
    per tensor:
        u16 + bytes         name (UTF-8)
        u8                  rank
        u32 * rank          dims
        f32 * prod(dims)    row-major payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ModelConfig, ModelParams, init_params

MAGIC = b"PAMNCKPT"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class CheckpointVersionError(CheckpointFormatError):
    pass


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(params: ModelParams, config: ModelConfig, meta: Optional[dict] = None) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    for blob in (_json(config.to_dict()), _json(meta or {})):
        out += struct.pack("<I", len(blob)) + blob
    named = params.named()
    out += struct.pack("<I", len(named))
    for name, p in named.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", p.data.ndim)
        out += struct.pack(f"<{p.data.ndim}I", *p.data.shape)
        out += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    return bytes(out)


def save_checkpoint(path, params: ModelParams, config: ModelConfig, meta: Optional[dict] = None) -> None:
    Path(path).write_bytes(encode(params, config, meta))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(
                f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, {len(self.buf) - self.pos} left"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> tuple[ModelParams, ModelConfig, dict]:
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("bad magic at offset 0: not a PAMNet checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} unsupported (expected {VERSION})")
    blobs = []
    for what in ("config", "metadata"):
        at = r.pos
        (n,) = r.unpack("<I", f"{what} length")
        try:
            blobs.append(json.loads(r.take(n, what).decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"malformed {what} JSON at offset {at}: {exc}") from None
    config = ModelConfig(**blobs[0])
    meta = blobs[1]

    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        at = r.pos
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B", f"rank of {name}")
        if not 1 <= rank <= 3:
            raise CheckpointFormatError(f"tensor {name!r} at offset {at} has invalid rank {rank}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims))
        payload = r.take(4 * size, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes at offset {r.pos}")

    template = init_params(config, 0)
    expected = {k: p for k, p in template.named().items()}
    if set(expected) != set(tensors):
        raise CheckpointFormatError(
            f"tensor names {sorted(tensors)} do not match config (expected {sorted(expected)})"
        )
    for name, p in expected.items():
        if p.data.shape != tensors[name].shape:
            raise CheckpointFormatError(f"tensor {name!r} has shape {tensors[name].shape}, config implies {p.data.shape}")
        p.data = tensors[name]
        p.grad = np.zeros_like(p.data)
    return template, config, meta


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    return decode(Path(path).read_bytes())

