"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SCRU"                      magic
    u16                          format version
    u32 + bytes                  UTF-8 JSON header (config, BN settings, metadata)
    u32                          record count
    records                      u16 name length, name, u8 dtype tag, u8 ndim,
                                 ndim x u32 shape, raw little-endian payload
    u32                          CRC32 of everything above
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .network import ModelConfig, ParamStore
from .tensor import Tensor5

MAGIC = b"SCRU"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamStore
    metadata: Dict = field(default_factory=dict)
    optimizer: Optional[Dict] = None  # {"lr", "beta1", "beta2", "eps", "t", "m", "v"}


def _record(name: str, arr: np.ndarray) -> bytes:
    tag = _TAGS.get(arr.dtype)
    if tag is None:
        raise CheckpointError(f"cannot store {name!r} with dtype {arr.dtype}")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def dumps(ckpt: Checkpoint) -> bytes:
    header = {
        "config": ckpt.config.to_dict(),
        "bn": {"momentum": ckpt.params.bn_momentum, "eps": ckpt.params.bn_eps},
        "metadata": ckpt.metadata,
    }
    records = []
    for name, t in ckpt.params.params.items():
        records.append(_record("param/" + name, t.data))
    for name, b in ckpt.params.buffers.items():
        records.append(_record("buffer/" + name, b))
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        header["optimizer"] = {k: opt[k] for k in ("lr", "beta1", "beta2", "eps", "t")}
        for name, a in opt["m"].items():
            records.append(_record("adam.m/" + name, a))
        for name, a in opt["v"].items():
            records.append(_record("adam.v/" + name, a))
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = (MAGIC + struct.pack("<H", VERSION) + struct.pack("<I", len(hdr)) + hdr
            + struct.pack("<I", len(records)) + b"".join(records))
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(blob: bytes) -> Checkpoint:
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}; expected {VERSION}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch: file is corrupt or truncated")
    r = _Reader(body)
    r.take(6)
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    (count,) = r.unpack("<I")
    arrays = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        tag, ndim = r.unpack("<BB")
        if tag not in _DTYPES:
            raise CheckpointError(f"record {name!r} has unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[tag]
        size = int(np.prod(shape)) * dt.itemsize
        arrays[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after the record table")

    config = ModelConfig.from_dict(header["config"])
    store = ParamStore(bn_momentum=header["bn"]["momentum"], bn_eps=header["bn"]["eps"])
    opt = None
    if "optimizer" in header:
        opt = dict(header["optimizer"], m=OrderedDict(), v=OrderedDict())
    for key, arr in arrays.items():
        kind, _, name = key.partition("/")
        if kind == "param":
            store.params[name] = Tensor5(arr, requires_grad=True, name=name)
        elif kind == "buffer":
            store.buffers[name] = arr
        elif kind in ("adam.m", "adam.v") and opt is not None:
            opt[kind[-1]][name] = arr
        else:
            raise CheckpointError(f"unexpected record {key!r}")
    return Checkpoint(config, store, header.get("metadata", {}), opt)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def read_config(path) -> ModelConfig:
    """Read only the config header, without touching the tensor payload."""
    with open(path, "rb") as fh:
        head = fh.read(10)
        if len(head) < 10 or head[:4] != MAGIC:
            raise CheckpointError("not a checkpoint: bad magic bytes")
        (version,) = struct.unpack("<H", head[4:6])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}; expected {VERSION}")
        (hlen,) = struct.unpack("<I", head[6:10])
        raw = fh.read(hlen)
    if len(raw) != hlen:
        raise CheckpointError("checkpoint truncated inside the header")
    return ModelConfig.from_dict(json.loads(raw.decode("utf-8"))["config"])
