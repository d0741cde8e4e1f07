"""Versioned binary container for named arrays.

Layout (all little-endian)::

    magic[4] | version u32 | header_len u32 | header (UTF-8 JSON) |
    count u32 | count x (name_len u16 | name | dtype u8 | ndim u8 | dims u32[ndim] | payload)

Payload dtypes: ``d`` float64, ``q`` int64, ``B`` uint8.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import CheckpointError

_DTYPES = {ord("d"): np.dtype("<f8"), ord("q"): np.dtype("<i8"), ord("B"): np.dtype("u1")}
_CODES = {np.dtype("<f8"): ord("d"), np.dtype("<i8"): ord("q"), np.dtype("u1"): ord("B")}


def _as_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu()
        if value.dtype == torch.uint8:
            return value.numpy().astype("u1")
        if value.dtype in (torch.int64, torch.int32):
            return value.numpy().astype("<i8")
        return value.to(torch.float64).numpy().astype("<f8")
    arr = np.asarray(value)
    if arr.dtype.kind in "iu" and arr.dtype != np.uint8:
        return arr.astype("<i8")
    if arr.dtype == np.uint8:
        return arr
    return arr.astype("<f8")


def encode_container(magic: bytes, version: int, header: Mapping, arrays: Mapping[str, object]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<II", version, len(head)), head, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = _as_array(arrays[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def write_container(path: str | Path, magic: bytes, version: int, header: Mapping,
                    arrays: Mapping[str, object]) -> str:
    blob = encode_container(magic, version, header, arrays)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_container(path: str | Path, magic: bytes, supported_versions=(1,)):
    """Return ``(version, header, arrays)``; arrays are numpy views copied out."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if blob[:4] != magic:
        raise CheckpointError(f"{path}: bad magic bytes {blob[:4]!r}, expected {magic!r}")
    try:
        version, head_len = struct.unpack_from("<II", blob, 4)
        if version not in supported_versions:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        off = 12
        header = json.loads(blob[off:off + head_len].decode("utf-8"))
        off += head_len
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BB", blob, off)
            off += 2
            dims = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            dtype = _DTYPES[code]
            size = int(np.prod(dims)) * dtype.itemsize
            if off + size > len(blob):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            arrays[name] = np.frombuffer(blob, dtype=dtype, count=int(np.prod(dims)), offset=off).reshape(dims).copy()
            off += size
    except CheckpointError:
        raise
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt container ({exc})") from exc
    return version, header, arrays


def hash_arrays(arrays: Mapping[str, object]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = _as_array(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
