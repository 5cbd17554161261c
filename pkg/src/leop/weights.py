"""Versioned weights file.

Layout (all integers little-endian)::

    b"LEOP" | u32 format version | u64 header length | UTF-8 JSON header | array data

The header lists every array as ``{"name", "shape"}`` in storage order; data are
contiguous little-endian float64 values in that order.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LEOP"
FORMAT_VERSION = 1


class WeightsFormatError(ValueError):
    pass


@dataclass
class WeightsFile:
    header: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}


def to_bytes(wf: WeightsFile) -> bytes:
    header = dict(wf.header)
    header["arrays"] = [{"name": k, "shape": list(np.shape(v))} for k, v in wf.arrays.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(blob)), blob]
    for v in wf.arrays.values():
        parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> WeightsFile:
    if data[:4] != MAGIC:
        raise WeightsFormatError("not a weights file (bad magic)")
    if len(data) < 16:
        raise WeightsFormatError("truncated file header")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != FORMAT_VERSION:
        raise WeightsFormatError(f"unsupported format version {version}")
    off = 16
    if off + hlen > len(data):
        raise WeightsFormatError("truncated JSON header")
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsFormatError(f"malformed JSON header: {exc}") from None
    off += hlen
    arrays = {}
    for spec in header.pop("arrays"):
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = off + 8 * n
        if end > len(data):
            raise WeightsFormatError(f"truncated array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(data[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        off = end
    if off != len(data):
        raise WeightsFormatError("trailing bytes after declared arrays")
    return WeightsFile(header, arrays)


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path: str | Path, wf: WeightsFile) -> str:
    """Write atomically; returns the sha256 of the written bytes."""
    data = to_bytes(wf)
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def load(path: str | Path) -> WeightsFile:
    return from_bytes(Path(path).read_bytes())


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
