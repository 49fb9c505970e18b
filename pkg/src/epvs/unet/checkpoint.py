"""Self-describing model checkpoint files.

Layout (all integers little-endian):

    magic      8 bytes  b"EPVSUNET"
    version    u32
    cfg_len    u32, then cfg_len bytes of UTF-8 JSON (the UNetConfig)
    count      u32
    count x tensor records:
        name_len u16, name (UTF-8)
        ndim     u8, ndim x u32 extents
        payload  prod(extents) x float64 (little-endian, C order)

Running normalization statistics are stored as records named
``buffer:<name>``.
"""
import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import TruncatedFileError, ValidationError
from .model import UNetConfig, UNetModel

MAGIC = b"EPVSUNET"
VERSION = 1
BUFFER_PREFIX = "buffer:"


class CheckpointError(ValidationError):
    pass


def encode_checkpoint(model: UNetModel) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    tensors = list(model.parameters.items()) + [(BUFFER_PREFIX + k, v) for k, v in model.buffers.items()]
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> UNetModel:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a U-Net checkpoint (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedFileError("checkpoint is truncated")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    version, cfg_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = UNetConfig(**json.loads(take(cfg_len).decode()))
    (count,) = struct.unpack("<I", take(4))
    params, buffers = {}, {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        if name.startswith(BUFFER_PREFIX):
            buffers[name[len(BUFFER_PREFIX):]] = arr
        else:
            params[name] = arr
    if pos != len(blob):
        raise CheckpointError("trailing bytes after the last tensor")
    return UNetModel(config, params, buffers)  # runs the shape audit


def save_checkpoint(model: UNetModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(encode_checkpoint(model))
    os.replace(tmp, path)


def load_checkpoint(path) -> UNetModel:
    return decode_checkpoint(Path(path).read_bytes())
