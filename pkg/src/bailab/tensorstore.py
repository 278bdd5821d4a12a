"""Checkpoint container and its bit-exact on-disk format.

File layout::

    b"BAICKPT1" | u64 little-endian header length H | H bytes UTF-8 JSON | payload

The JSON header maps each tensor name to dtype, shape, payload offset and byte
count. Tensors are laid out in lexicographic name order with no padding, so
the file bytes are a pure function of the checkpoint contents.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"BAICKPT1"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}

ROLES = ("base", "sft-instruct", "sft-reason", "merged", "rm", "critic", "actor")


class CheckpointError(Exception):
    """Base class for checkpoint format and content errors."""


class NonFiniteError(CheckpointError):
    def __init__(self, name: str, index: int):
        super().__init__(f"non-finite value in tensor {name!r} at flat index {index}")
        self.name = name
        self.index = index


class BadMagicError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class HeaderError(CheckpointError):
    pass


class IncompatibleError(CheckpointError):
    """Raised when two checkpoints cannot be merged element-wise."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODES:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    if arr.ndim < 1 or any(d < 1 for d in arr.shape):
        raise CheckpointError(f"invalid shape {arr.shape}")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Checkpoint:
    """Named float tensors plus a string metadata map.

    Tensors are stored as read-only numpy arrays and iterate in lexicographic
    name order regardless of insertion order.
    """

    meta: Mapping[str, str]
    tensors: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        meta = {str(k): str(v) for k, v in sorted(self.meta.items())}
        for key in ("arch", "vocab"):
            if key not in meta:
                raise CheckpointError(f"meta is missing required key {key!r}")
        tensors = {name: _freeze(self.tensors[name]) for name in sorted(self.tensors)}
        object.__setattr__(self, "meta", meta)
        object.__setattr__(self, "tensors", tensors)

    @property
    def role(self) -> str:
        return self.meta.get("role", "")

    def names(self) -> list[str]:
        return list(self.tensors)

    def with_meta(self, **updates: str) -> "Checkpoint":
        return Checkpoint({**self.meta, **updates}, self.tensors)

    def astype(self, dtype) -> "Checkpoint":
        return Checkpoint(self.meta, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.meta != other.meta or list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )

    __hash__ = None  # type: ignore[assignment]


def check_compatible(a: Checkpoint, b: Checkpoint) -> None:
    """Raise IncompatibleError naming the first offending tensor, if any."""
    names = sorted(set(a.tensors) | set(b.tensors))
    for name in names:
        if name not in a.tensors or name not in b.tensors:
            raise IncompatibleError(f"tensor {name!r} present in only one checkpoint")
        x, y = a.tensors[name], b.tensors[name]
        if x.shape != y.shape or x.dtype != y.dtype:
            raise IncompatibleError(
                f"tensor {name!r} mismatch: {x.dtype}{list(x.shape)} vs {y.dtype}{list(y.shape)}"
            )


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = {"meta": dict(ckpt.meta), "tensors": {}}
    chunks = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise NonFiniteError(name, int(bad[0]))
        code = _CODES[arr.dtype]
        raw = arr.astype(_DTYPES[code], copy=False).tobytes(order="C")
        header["tensors"][name] = {
            "dtype": code,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 16:
        if blob[: len(MAGIC)] != MAGIC[: len(blob)]:
            raise BadMagicError("bad magic bytes")
        raise TruncatedError(f"file too short ({len(blob)} bytes)")
    if blob[:8] != MAGIC:
        raise BadMagicError(f"bad magic bytes {blob[:8]!r}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise TruncatedError("header extends past end of file")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
        meta = header["meta"]
        entries = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise HeaderError(f"unreadable header: {exc}") from exc
    payload = memoryview(blob)[16 + hlen :]
    expected = 0
    tensors = {}
    for name in sorted(entries):
        ent = entries[name]
        dtype = _DTYPES.get(ent.get("dtype"))
        if dtype is None:
            raise HeaderError(f"tensor {name!r}: unknown dtype {ent.get('dtype')!r}")
        shape = tuple(int(d) for d in ent["shape"])
        count = int(np.prod(shape)) if shape else 0
        if not shape or count * dtype.itemsize != ent["nbytes"]:
            raise HeaderError(f"tensor {name!r}: shape {list(shape)} disagrees with nbytes")
        if ent["offset"] != expected:
            raise HeaderError(f"tensor {name!r}: offset {ent['offset']} != {expected}")
        end = expected + ent["nbytes"]
        if end > len(payload):
            raise TruncatedError(f"payload truncated inside tensor {name!r}")
        arr = np.frombuffer(payload[expected:end], dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
        expected = end
    if expected != len(payload):
        if expected > len(payload):
            raise TruncatedError("payload shorter than header declares")
        raise HeaderError(f"{len(payload) - expected} trailing payload bytes")
    return Checkpoint(meta, tensors)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    blob = to_bytes(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def checksum(ckpt: Checkpoint) -> str:
    """SHA-256 over the canonical serialization."""
    return hashlib.sha256(to_bytes(ckpt)).hexdigest()


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
