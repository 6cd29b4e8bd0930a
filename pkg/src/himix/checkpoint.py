"""Single-file checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"HIMIXCK1"
    header_len   uint32
    header       header_len bytes, UTF-8 canonical JSON of the ModelConfig
                 (sorted keys, no whitespace)
    n_blocks     uint32
    n_blocks times:
        name_len uint16
        name     name_len bytes, UTF-8
        rows     uint32
        cols     uint32
        values   rows*cols float32, row-major

Weights are stored as float32; a model saved from float32 weights loads back
bit-identical.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .decoder import Model, ModelConfig

MAGIC = b"HIMIXCK1"


class CheckpointError(ValueError):
    pass


def dumps(model: Model) -> bytes:
    buf = io.BytesIO()
    header = model.cfg.to_json().encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(model.params)))
    for name, arr in model.params.items():
        if arr.ndim != 2:
            raise CheckpointError(f"block {name} is not 2-D: {arr.shape}")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> Model:
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("not a himix checkpoint (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    cfg = ModelConfig.from_json(bytes(take(hlen)).decode())
    (n_blocks,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(n_blocks):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        rows, cols = struct.unpack("<II", take(8))
        params[name] = np.frombuffer(take(4 * rows * cols), dtype="<f4").reshape(rows, cols).astype(np.float32)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last block")
    return Model(cfg, params)


def save(model: Model, path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path) -> Model:
    return loads(Path(path).read_bytes())
