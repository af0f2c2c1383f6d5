"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"WEAMCKPT"
    version    u32
    n_meta     u32, then n_meta x (key: u32 len + UTF-8, value: u32 len + UTF-8)
    n_arrays   u32, then n_arrays x (name: u32 len + UTF-8, dtype tag u8,
                                     ndim u32, ndim x u32 extents, raw values)
    checksum   u64  first 8 bytes of BLAKE2b over everything before it

Arrays hold the model parameters and, when present, the Adam moments under
``adam.m.<name>`` / ``adam.v.<name>``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IntegrityError, VersionError

MAGIC = b"WEAMCKPT"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_TAGS = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    @property
    def state(self) -> dict:
        return json.loads(self.meta.get("state", "{}"))


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(ckpt.meta))]
    for k in sorted(ckpt.meta):
        out += [_str(k), _str(ckpt.meta[k])]
    arrays = dict(ckpt.params)
    arrays.update({f"adam.m.{k}": v for k, v in ckpt.adam_m.items()})
    arrays.update({f"adam.v.{k}": v for k, v in ckpt.adam_v.items()})
    out.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise TypeError(f"cannot store dtype {arr.dtype} for {name}")
        out += [_str(name), struct.pack("<BI", _TAGS[dt], arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape)]
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(out)
    return body + _checksum(body)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError("checkpoint truncated")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC) + 12 or buf[: len(MAGIC)] != MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic)")
    body, digest = buf[:-8], buf[-8:]
    if _checksum(body) != digest:
        raise IntegrityError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(len(MAGIC))
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, expected {VERSION}")
    meta = {}
    for _ in range(r.u32()):
        k = r.text()
        meta[k] = r.text()
    params, m, v = {}, {}, {}
    for _ in range(r.u32()):
        name = r.text()
        tag, ndim = struct.unpack("<BI", r.take(5))
        if tag not in _DTYPES:
            raise IntegrityError(f"unknown dtype tag {tag} for {name}")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        dt = _DTYPES[tag]
        arr = np.frombuffer(r.take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize), dtype=dt).reshape(shape).copy()
        if name.startswith("adam.m."):
            m[name[7:]] = arr
        elif name.startswith("adam.v."):
            v[name[7:]] = arr
        else:
            params[name] = arr
    if r.pos != len(body):
        raise IntegrityError("trailing bytes in checkpoint")
    return Checkpoint(params, meta, m, v, version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return decode_checkpoint(path.read_bytes())
