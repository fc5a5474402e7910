"""Versioned binary checkpoints.

Layout (all integers little-endian):

    b"BIFL" | u32 version | u32 header length | header (UTF-8 JSON)
    u32 array count | per array: u16 name length, name, u8 dtype tag,
                      u8 ndim, u32 dims..., u64 byte count, raw data

The header carries the config snapshot, the rng state and the step counter.
EMA arrays are stored next to the parameters under an ``ema/`` prefix.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"BIFL"
VERSION = 1
EMA_PREFIX = "ema/"

_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    arrays: dict[str, np.ndarray]
    rng_state: dict | None = None
    step: int = 0
    meta: dict = field(default_factory=dict)

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Arrays under ``prefix`` (prefix stripped), excluding EMA copies."""
        return {k[len(prefix):]: v for k, v in self.arrays.items()
                if k.startswith(prefix) and not k.startswith(EMA_PREFIX)}

    def ema(self, prefix: str = "") -> dict[str, np.ndarray]:
        p = EMA_PREFIX + prefix
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}


def _to_json(obj):
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _to_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_json(v) for v in obj]
    return obj


def _from_json(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_json(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_from_json(v) for v in obj]
    return obj


def dumps(ckpt: Checkpoint) -> bytes:
    header = json.dumps({"config": ckpt.config, "rng": _to_json(ckpt.rng_state), "step": int(ckpt.step),
                         "meta": _to_json(ckpt.meta)}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
    buf.write(struct.pack("<I", len(ckpt.arrays)))
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAG_OF:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        tag = _TAG_OF[arr.dtype]
        data = np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes()
        key = name.encode()
        buf.write(struct.pack("<H", len(key)) + key)
        buf.write(struct.pack("<BB", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<Q", len(data)) + data)
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(raw: bytes, dtype=None) -> Checkpoint:
    """Parse checkpoint bytes. ``dtype`` casts float arrays (e.g. widen to float64)."""
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header: {e}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        tag, ndim = r.unpack("<BB")
        if tag not in _TAGS:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        dt = _TAGS[tag]
        if nbytes != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name}: byte count does not match shape {shape}")
        arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        if dtype is not None and arr.dtype.kind == "f":
            arr = arr.astype(dtype)
        arrays[name] = arr
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after the last array")
    return Checkpoint(header["config"], arrays, _from_json(header["rng"]), header["step"],
                      _from_json(header.get("meta", {})))


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    with open(path, "wb") as f:
        f.write(dumps(ckpt))


def load_checkpoint(path: str, dtype=None) -> Checkpoint:
    with open(path, "rb") as f:
        return loads(f.read(), dtype)
