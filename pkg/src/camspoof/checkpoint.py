"""
Binary checkpoint: "CMID" magic, u32 version, length-prefixed UTF-8 JSON
header (model config plus training metadata), u32 parameter count, then one
record per parameter: length-prefixed name, u32 rank, u32 extents and raw
little-endian float32 values. All integers are little-endian u32.
"""
import json
import struct
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, parameter_shapes

MAGIC = b"CMID"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _u32(n):
    return struct.pack("<I", n)


def encode(model, metadata=None):
    header = json.dumps({"config": model.config.to_dict(), "metadata": metadata or {}}, sort_keys=True)
    raw = header.encode("utf-8")
    parts = [MAGIC, _u32(VERSION), _u32(len(raw)), raw, _u32(len(model.parameters))]
    for name in sorted(model.parameters):
        arr = np.asarray(model.parameters[name])
        key = name.encode("utf-8")
        parts += [_u32(len(key)), key, _u32(arr.ndim)]
        parts += [_u32(e) for e in arr.shape]
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model, path, metadata=None):
    path = Path(path)
    try:
        path.write_bytes(encode(model, metadata))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def decode(data):
    """``(Model, metadata)`` from checkpoint bytes; nothing partial escapes on error."""
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a CMID checkpoint")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        header = json.loads(r.take(r.u32("header length"), "header").decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    except ValueError as exc:
        raise CheckpointError(f"invalid model config in checkpoint: {exc}") from exc
    expected = parameter_shapes(config)
    count = r.u32("parameter count")
    if count != len(expected):
        raise CheckpointError(f"checkpoint holds {count} parameters, config implies {len(expected)}")
    params = {}
    for _ in range(count):
        name = r.take(r.u32("name length"), "name").decode("utf-8", errors="replace")
        rank = r.u32(f"rank of {name}")
        shape = tuple(r.u32(f"extent of {name}") for _ in range(rank))
        if name not in expected:
            raise CheckpointError(f"unexpected parameter {name!r}")
        if name in params:
            raise CheckpointError(f"duplicate parameter {name!r}")
        if shape != tuple(expected[name]):
            raise CheckpointError(f"parameter {name} has shape {shape}, config implies {tuple(expected[name])}")
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n, f"values of {name}"), dtype="<f4").astype(np.float32).reshape(shape)
        if not np.isfinite(arr).all():
            raise CheckpointError(f"parameter {name} contains non-finite values")
        params[name] = arr
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last parameter")
    return Model(config, params), header.get("metadata", {})


def load_checkpoint(path, with_metadata=False):
    model, metadata = decode(Path(path).read_bytes())
    return (model, metadata) if with_metadata else model
