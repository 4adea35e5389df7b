"""RMDN weight checkpoint container.

Layout (all integers little-endian)::

    b"RMDN" | u32 format version | u32 len | ModelConfig as JSON (utf-8)
    | u32 tensor count
    | per tensor: u32 name length | name (utf-8) | u32 rank | u64 dims...
                  | row-major float64 payload
    | u32 CRC32 of every preceding byte

Files are written through a temporary file and renamed into place.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from ._fileio import atomic_write
from .errors import CorruptFile, InvalidArgument
from .network import ModelConfig, ModelWeights

MAGIC = b"RMDN"
FORMAT_VERSION = 1


def encode(weights: ModelWeights) -> bytes:
    cfg = json.dumps(weights.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(cfg)), cfg, struct.pack("<I", len(weights))]
    for name, arr in weights.items():
        raw_name = name.encode()
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> ModelWeights:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptFile("not an RMDN checkpoint (bad magic)")
    body, trailer = blob[:-4], blob[-4:]
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body):
        raise CorruptFile("checkpoint CRC32 mismatch")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise CorruptFile("truncated checkpoint")
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    version, cfg_len = take("<II")
    if version != FORMAT_VERSION:
        raise CorruptFile(f"unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_dict(json.loads(body[pos : pos + cfg_len].decode()))
    except (ValueError, TypeError, KeyError) as exc:
        raise CorruptFile(f"invalid model config in checkpoint: {exc}") from None
    pos += cfg_len
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = body[pos : pos + name_len].decode()
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        end = pos + 8 * n
        if end > len(body):
            raise CorruptFile(f"truncated payload for tensor {name}")
        tensors[name] = np.frombuffer(body[pos:end], dtype="<f8").reshape(dims).astype(np.float64)
        pos = end
    if pos != len(body):
        raise CorruptFile("trailing bytes after the last tensor")
    try:
        return ModelWeights(config, tensors)
    except InvalidArgument as exc:
        raise CorruptFile(f"checkpoint tensors do not match the config: {exc}") from None


def save_checkpoint(path, weights: ModelWeights):
    atomic_write(path, encode(weights))


def load_checkpoint(path) -> ModelWeights:
    with open(path, "rb") as fh:
        return decode(fh.read())
