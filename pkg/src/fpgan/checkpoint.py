"""FPGN tensor container and the training checkpoint built on it.

Layout (little-endian)::

    b"FPGN" | u8 version (=1) | u32 count |
    count x ( u16 name_len | name utf-8 | u8 dtype (0=f32, 1=f64) | u8 ndim |
              ndim x u64 dims | raw data )
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, VersionError

MAGIC = b"FPGN"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

META_STEP = "__meta__/step"
META_CONFIG = "__meta__/config"


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BI", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError(f"truncated container: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}, expected version {VERSION}")
    (count,) = r.unpack("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptionError(f"tensor name is not UTF-8: {exc}") from None
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CorruptionError(f"tensor {name!r}: unknown dtype code {code}")
        dims = r.unpack(f"<{ndim}Q")
        dt = _CODE_DTYPES[code]
        count_elems = int(np.prod(dims, dtype=np.uint64)) if ndim else 1
        arr = np.frombuffer(r.take(count_elems * dt.itemsize), dtype=dt).reshape(dims)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if r.pos != len(data):
        raise CorruptionError(f"{len(data) - r.pos} trailing bytes after last tensor")
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tensors(tensors))
    os.replace(tmp, path)


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    step: int = 0
    version: int = VERSION

    def to_container(self) -> dict[str, np.ndarray]:
        out = dict(self.tensors)
        out[META_STEP] = np.array([self.step], dtype=np.float64)
        blob = json.dumps(self.config, sort_keys=True).encode("utf-8")
        out[META_CONFIG] = np.frombuffer(blob, dtype=np.uint8).astype(np.float64)
        return out

    @classmethod
    def from_container(cls, tensors: dict[str, np.ndarray]) -> "Checkpoint":
        tensors = dict(tensors)
        step = tensors.pop(META_STEP, np.zeros(1))
        cfg = tensors.pop(META_CONFIG, None)
        config = {}
        if cfg is not None:
            config = json.loads(cfg.astype(np.uint8).tobytes().decode("utf-8"))
        return cls(tensors, config, int(step[0]))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    save_tensors(path, ckpt.to_container())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_container(load_tensors(path))
