"""``CATN`` checkpoint files.

Layout, little-endian::

    b"CATN" | u32 version | u32 len | config JSON bytes
    then until EOF, per tensor:
    u32 name_len | name bytes | u32 rank | u32 dims[rank] | f64 data (row-major)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .model import TrainConfig

MAGIC = b"CATN"
VERSION = 1


def save_checkpoint(path, params: dict, config: TrainConfig) -> None:
    cfg = config.to_json().encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg]
    for name in sorted(params):
        arr = np.ascontiguousarray(getattr(params[name], "data", params[name]), dtype="<f8")
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], TrainConfig]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: not a CATN checkpoint")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, cfg_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {VERSION}")
    config = TrainConfig.from_json(take(cfg_len).decode())
    params = {}
    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return params, config
