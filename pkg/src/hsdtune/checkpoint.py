"""``ULMA1`` checkpoint files.

Layout: the 5 magic bytes ``ULMA1``, an unsigned 64-bit little-endian header
length, the UTF-8 JSON header, then every tensor as little-endian float32 in
manifest order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .encoder import EncoderConfig, param_tags
from .optim import OptimizerState
from .tokenizer import atomic_write_bytes

MAGIC = b"ULMA1"
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: dict
    optimizer: Optional[OptimizerState] = None
    meta: dict = field(default_factory=dict)


def _tensors(ckpt: Checkpoint):
    for name, arr in ckpt.params.items():
        group, depth = param_tags(name)
        yield name, arr, {"group": group, "depth": depth}
    if ckpt.optimizer is not None:
        for name in ckpt.params:
            if name in ckpt.optimizer.m:
                yield f"adam.m/{name}", ckpt.optimizer.m[name], {}
                yield f"adam.v/{name}", ckpt.optimizer.v[name], {}


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest, blobs, offset = [], [], 0
    for name, arr, tags in _tensors(ckpt):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, **tags})
        blobs.append(data)
        offset += len(data)
    header = {"format": "ULMA1", "config": ckpt.config.to_dict(), "tensors": manifest, "meta": ckpt.meta}
    if ckpt.optimizer is not None:
        header["optimizer"] = {"t": ckpt.optimizer.t,
                               "counts": {k: ckpt.optimizer.counts[k] for k in ckpt.params if k in ckpt.optimizer.counts}}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(raw)) + raw + b"".join(blobs)


def save(path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, to_bytes(ckpt))


def from_bytes(data: bytes, dtype=np.float32) -> Checkpoint:
    if data[:5] != MAGIC:
        raise CheckpointError(f"bad magic {data[:5]!r}; not a ULMA1 checkpoint")
    if len(data) < 13:
        raise CheckpointError("truncated checkpoint header")
    (n,) = _LEN.unpack(data[5:13])
    try:
        header = json.loads(data[13:13 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    body = memoryview(data)[13 + n:]
    config = EncoderConfig(**header["config"])
    params, m, v = {}, {}, {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start, stop = entry["offset"], entry["offset"] + 4 * count
        if stop > len(body):
            raise CheckpointError(f"tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(body[start:stop], dtype="<f4").reshape(shape).astype(dtype)
        name = entry["name"]
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        else:
            if "group" in entry and (entry["group"], entry["depth"]) != param_tags(name):
                raise CheckpointError(f"tensor {name}: manifest tags disagree with parameter name")
            params[name] = arr
    optimizer = None
    if "optimizer" in header:
        opt = header["optimizer"]
        optimizer = OptimizerState(m=m, v=v, t=opt["t"], counts=dict(opt["counts"]))
    return Checkpoint(config, params, optimizer, header.get("meta", {}))


def load(path, dtype=np.float32) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), dtype)
