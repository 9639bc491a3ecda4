"""Binary checkpoint format.

Little-endian layout::

    b"CRVT"                       magic
    u32 version                   (1)
    u64 n, n bytes                model config, UTF-8 config-file text
    u64 count                     tensor directory
      u32 len, len bytes          tensor name (UTF-8)
      u32 rank, rank x u64        dims
      u64 offset                  byte offset into the payload
    payload                       float32 arrays in directory order

Parameters are held as float64 in memory and stored as float32, so
save -> load -> save is byte-identical.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ModelConfig
from .model import Parameters, build

MAGIC = b"CRVT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ShapeError(CheckpointError):
    pass


def to_bytes(params: Parameters, config: ModelConfig) -> bytes:
    text = cfgmod.dumps(config).encode("utf-8")
    named = params.named()
    head = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(text)), text, struct.pack("<Q", len(named))]
    payload = []
    offset = 0
    for name, t in named.items():
        raw = name.encode("utf-8")
        head.append(struct.pack("<I", len(raw)) + raw)
        head.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape))
        head.append(struct.pack("<Q", offset))
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        payload.append(blob)
        offset += len(blob)
    return b"".join(head) + b"".join(payload)


def save_checkpoint(params: Parameters, config: ModelConfig, path) -> None:
    Path(path).write_bytes(to_bytes(params, config))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def from_bytes(buf: bytes, expected: ModelConfig | None = None) -> tuple[Parameters, ModelConfig]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        text = r.take(r.u64()).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"config header is not UTF-8: {exc}") from None
    stored = cfgmod.loads_model(text)
    directory = []
    for _ in range(r.u64()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(struct.unpack(f"<{rank}Q", r.take(8 * rank)))
        directory.append((name, dims, r.u64()))
    payload = r.buf[r.pos :]

    target_cfg = expected or stored
    params = build(target_cfg, seed=0)
    named = params.named()
    names = [d[0] for d in directory]
    if names != list(named):
        missing = [n for n in named if n not in names]
        extra = [n for n in names if n not in named]
        raise ShapeError(f"tensor directory does not match the model layout; missing {missing[:5]}, unexpected {extra[:5]}")
    for name, dims, offset in directory:
        t = named[name]
        if dims != t.shape:
            raise ShapeError(f"tensor {name!r}: checkpoint shape {dims} != model shape {t.shape}")
        nbytes = 4 * int(np.prod(dims))
        if offset + nbytes > len(payload):
            raise CheckpointError(f"truncated checkpoint: payload for {name!r} ends past end of file")
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(dims)), offset=offset)
        t.data = arr.astype(np.float64).reshape(dims)
    return params, target_cfg


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[Parameters, ModelConfig]:
    """Read (params, config).  With ``expected`` the tensors must fit that config."""
    return from_bytes(Path(path).read_bytes(), expected)
