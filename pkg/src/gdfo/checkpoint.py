"""Self-describing binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"GDFOCKPT"
    version    u32
    hdr_len    u32
    header     hdr_len bytes of UTF-8 JSON, keys sorted, no whitespace:
               {"kind": str, "scalars": {name: value}, "tensors": [[name, shape], ...]}
    payload    for each entry of header["tensors"], in order:
               product(shape) float64 values, row-major

Scalars are JSON numbers, strings, booleans, null or lists of those. The
tensor order is the order the writer supplied, so a writer that supplies a
fixed order produces byte-identical files for identical values.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from gdfo.errors import CheckpointError

MAGIC = b"GDFOCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


@dataclass
class Checkpoint:
    kind: str
    scalars: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def dumps(kind: str, scalars: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    arrays = [(name, np.ascontiguousarray(value, dtype="<f8")) for name, value in tensors.items()]
    header = {
        "kind": kind,
        "scalars": dict(scalars),
        "tensors": [[name, list(a.shape)] for name, a in arrays],
    }
    try:
        blob = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"unserializable scalar in {kind} checkpoint: {exc}") from exc
    parts = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)), blob]
    parts.extend(a.tobytes(order="C") for _, a in arrays)
    return b"".join(parts)


def loads(raw: bytes) -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, hdr_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    header = json.loads(raw[start:start + hdr_len].decode())
    offset = start + hdr_len
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"truncated payload for tensor {name!r}")
        tensors[name] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(header["kind"], header["scalars"], tensors)


def checksum(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def save(path, kind: str, scalars: Mapping, tensors: Mapping[str, np.ndarray]) -> str:
    raw = dumps(kind, scalars, tensors)
    Path(path).write_bytes(raw)
    return checksum(raw)


def load(path, kind: str | None = None) -> Checkpoint:
    ckpt = loads(Path(path).read_bytes())
    if kind is not None and ckpt.kind != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {ckpt.kind!r}")
    return ckpt
