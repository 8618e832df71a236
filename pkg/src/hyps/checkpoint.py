"""Portable checkpoint container.

Byte layout (all integers little-endian)::

    0      8   magic  b"HYPSCKPT"
    8      4   u32    format version (currently 1)
    12     4   u32    manifest length L in bytes
    16     L   UTF-8 JSON manifest (sorted keys); manifest["tensors"] lists
               the tensor names in payload order
    16+L   ..  for each tensor: u32 ndim, ndim x u32 dims, then
               prod(dims) float64 values in row-major (C) order

The manifest carries everything needed to rebuild the object (variant,
ranks, scales, layer inventory and, for whole models, the architecture).
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"HYPSCKPT"
VERSION = 1


def encode(manifest: dict, tensors: dict[str, np.ndarray]) -> bytes:
    manifest = dict(manifest)
    manifest["tensors"] = list(tensors)
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 16:
        raise FormatError("checkpoint shorter than its 16-byte header", len(blob))
    if blob[:8] != MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:8]!r}", 0)
    version, mlen = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    if 16 + mlen > len(blob):
        raise FormatError("manifest runs past end of file", 12)
    try:
        manifest = json.loads(blob[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", 16) from None
    if not isinstance(manifest, dict):
        raise FormatError("manifest is not a JSON object", 16)
    names = manifest.get("tensors")
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise FormatError("manifest lacks a tensor list", 16)
    off = 16 + mlen
    tensors: dict[str, np.ndarray] = {}
    for name in names:
        if off + 4 > len(blob):
            raise FormatError(f"truncated before tensor {name!r}", off)
        (ndim,) = struct.unpack_from("<I", blob, off)
        if ndim > 8:
            raise FormatError(f"tensor {name!r} declares {ndim} dimensions", off)
        off += 4
        if off + 4 * ndim > len(blob):
            raise FormatError(f"truncated dims of tensor {name!r}", off)
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if off + nbytes > len(blob):
            raise FormatError(f"truncated payload of tensor {name!r}", off)
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=off).reshape(dims).astype(np.float64)
        off += nbytes
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after last tensor", off)
    return manifest, tensors


def save(path: str | os.PathLike, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(manifest, tensors))


def load(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode(fh.read())
