"""Binary checkpoint container.

Layout (little-endian)::

    b"ILMF"  u32 format version  u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, u32 extent * rank,
                float64 payload (row-major)
    u32 config length, UTF-8 "key=value" lines

The same container stores model parameters, internal-LM statistics and
mini self-attention parameters; what a file holds is recorded in the config
block under ``kind``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"ILMF"
VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict[str, str] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.params:
            if not name or len(name.encode("utf-8")) > 0xFFFF:
                raise ValueError(f"invalid tensor name {name!r}")


def _encode_block(config: dict[str, str], meta: dict[str, str]) -> bytes:
    lines = []
    for prefix, mapping in (("config.", config), ("meta.", meta)):
        for key in sorted(mapping):
            value = str(mapping[key])
            if "\n" in key or "\n" in value or "=" in key:
                raise ValueError(f"cannot serialise config entry {key!r}")
            lines.append(f"{prefix}{key}={value}")
    return "\n".join(lines).encode("utf-8")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(ckpt.params))
    for name, arr in ckpt.params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    block = _encode_block(ckpt.config, ckpt.meta)
    out += struct.pack("<I", len(block)) + block
    return bytes(out)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def checkpoint_digest(ckpt: Checkpoint) -> str:
    """sha256 of the serialised form; equals :func:`file_digest` of the saved file."""
    return hashlib.sha256(checkpoint_bytes(ckpt)).hexdigest()


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated while reading {what}", offset=self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: str | Path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic bytes, not an ILMF checkpoint", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}", offset=4)
    (count,) = r.unpack("<I", "tensor count")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack("<H", "name length")
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: tensor name is not UTF-8", offset=start) from exc
        if name in params:
            raise FormatError(f"{path}: duplicate tensor {name!r}", offset=start)
        (rank,) = r.unpack("<B", "rank")
        shape = r.unpack(f"<{rank}I", "extents") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        payload = r.take(8 * n, f"payload of {name}")
        params[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    (block_len,) = r.unpack("<I", "config length")
    try:
        block = r.take(block_len, "config block").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: config block is not UTF-8", offset=r.pos) from exc
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes", offset=r.pos)
    config: dict[str, str] = {}
    meta: dict[str, str] = {}
    for line in filter(None, block.split("\n")):
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed config line {line!r}")
        if key.startswith("config."):
            config[key[len("config."):]] = value
        elif key.startswith("meta."):
            meta[key[len("meta."):]] = value
        else:
            raise FormatError(f"{path}: config key {key!r} has no section")
    return Checkpoint(params, config, meta)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
