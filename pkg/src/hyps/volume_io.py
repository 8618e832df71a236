"""Volume files: a small native format and a single-file NIfTI-1 subset.

Native layout (little-endian)::

    0   12  magic b"HYPS-VOLUME\\0"
    12   4  u32 version (1)
    16  12  3 x u32 dims (nx, ny, nz)
    28  24  3 x f64 spacing in mm
    52   4  u32 dtype code: 1 uint8, 2 int16, 3 float32, 4 float64
    56  ..  voxels, x varying fastest

NIfTI-1 support covers uncompressed ``.nii`` files with magic ``n+1``,
3-D data (a 4-D header with a singleton 4th axis is accepted) and datatypes
uint8, int16 and float32. Extensions are skipped via ``vox_offset``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError

NATIVE_MAGIC = b"HYPS-VOLUME\x00"
NATIVE_VERSION = 1
NATIVE_HEADER = 56
_NATIVE_DTYPES = {1: "u1", 2: "i2", 3: "f4", 4: "f8"}
_NATIVE_CODES = {v: k for k, v in _NATIVE_DTYPES.items()}

NIFTI_HEADER = 348
_NIFTI_DTYPES = {2: "u1", 4: "i2", 16: "f4"}
_NIFTI_CODES = {v: k for k, v in _NIFTI_DTYPES.items()}


@dataclass
class LabelVolume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"volume must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ShapeError(f"spacing must be three positive values, got {self.spacing}")


def _dtype_key(arr: np.ndarray) -> str:
    return arr.dtype.newbyteorder("=").str[1:]


def encode_native(vol: LabelVolume) -> bytes:
    data = vol.data
    if data.dtype == bool:
        data = data.astype(np.uint8)
    key = _dtype_key(data)
    if key not in _NATIVE_CODES:
        raise FormatError(f"native format cannot store dtype {data.dtype}")
    header = NATIVE_MAGIC + struct.pack(
        "<I3I3dI", NATIVE_VERSION, *data.shape, *vol.spacing, _NATIVE_CODES[key]
    )
    payload = np.asarray(data, dtype="<" + key).tobytes(order="F")
    return header + payload


def decode_native(blob: bytes) -> LabelVolume:
    if len(blob) < NATIVE_HEADER:
        raise FormatError("file shorter than the native header", len(blob))
    if blob[:12] != NATIVE_MAGIC:
        raise FormatError("bad native magic", 0)
    version, nx, ny, nz, sx, sy, sz, code = struct.unpack_from("<I3I3dI", blob, 12)
    if version != NATIVE_VERSION:
        raise FormatError(f"unsupported native version {version}", 12)
    if code not in _NATIVE_DTYPES:
        raise FormatError(f"unknown dtype code {code}", 52)
    if min(nx, ny, nz) < 1:
        raise FormatError(f"non-positive dims {(nx, ny, nz)}", 16)
    dt = np.dtype("<" + _NATIVE_DTYPES[code])
    count = nx * ny * nz
    need = NATIVE_HEADER + count * dt.itemsize
    if len(blob) < need:
        raise FormatError(f"payload truncated: need {need} bytes, have {len(blob)}", len(blob))
    data = np.frombuffer(blob, dtype=dt, count=count, offset=NATIVE_HEADER)
    data = data.reshape((nx, ny, nz), order="F").astype(dt.newbyteorder("="))
    try:
        return LabelVolume(data, (sx, sy, sz))
    except ShapeError as exc:
        raise FormatError(str(exc), 28) from None


def decode_nifti(blob: bytes) -> LabelVolume:
    if len(blob) < NIFTI_HEADER:
        raise FormatError("file shorter than a NIfTI-1 header", len(blob))
    if struct.unpack_from("<i", blob, 0)[0] == NIFTI_HEADER:
        e = "<"
    elif struct.unpack_from(">i", blob, 0)[0] == NIFTI_HEADER:
        e = ">"
    else:
        raise FormatError("sizeof_hdr is not 348", 0)
    magic = blob[344:348]
    if magic != b"n+1\x00":
        raise FormatError(f"unsupported NIfTI magic {magic!r} (only single-file n+1)", 344)
    dim = struct.unpack_from(e + "8h", blob, 40)
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise FormatError(f"expected 3-D data, dim={dim}", 40)
    shape = dim[1:4]
    if min(shape) < 1:
        raise FormatError(f"non-positive dims {shape}", 42)
    datatype, bitpix = struct.unpack_from(e + "hh", blob, 70)
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"unsupported NIfTI datatype code {datatype}", 70)
    dt = np.dtype(e + _NIFTI_DTYPES[datatype])
    if bitpix != 8 * dt.itemsize:
        raise FormatError(f"bitpix {bitpix} inconsistent with datatype {datatype}", 72)
    pixdim = struct.unpack_from(e + "8f", blob, 76)
    spacing = tuple(abs(float(p)) for p in pixdim[1:4])
    if min(spacing) <= 0 or not all(np.isfinite(spacing)):
        raise FormatError(f"invalid pixdim spacing {spacing}", 80)
    (vox_offset,) = struct.unpack_from(e + "f", blob, 108)
    offset = int(vox_offset)
    if offset < NIFTI_HEADER or offset != vox_offset:
        raise FormatError(f"invalid vox_offset {vox_offset}", 108)
    count = shape[0] * shape[1] * shape[2]
    if offset + count * dt.itemsize > len(blob):
        raise FormatError(
            f"voxel payload truncated: need {count * dt.itemsize} bytes from offset {offset}", len(blob)
        )
    data = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
    data = data.reshape(shape, order="F").astype(dt.newbyteorder("="))
    return LabelVolume(data, spacing)


def encode_nifti(vol: LabelVolume) -> bytes:
    data = vol.data
    if data.dtype == bool:
        data = data.astype(np.uint8)
    key = _dtype_key(data)
    if key not in _NIFTI_CODES:
        raise FormatError(f"NIfTI subset cannot store dtype {data.dtype}")
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, _NIFTI_CODES[key], 8 * data.dtype.itemsize)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + np.asarray(data, dtype="<" + key).tobytes(order="F")


def read_volume(path: str | os.PathLike) -> LabelVolume:
    """Read a native or NIfTI-1 volume, detected from the leading bytes."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:12] == NATIVE_MAGIC:
        return decode_native(blob)
    if len(blob) >= 4 and NIFTI_HEADER in (struct.unpack_from("<i", blob, 0)[0], struct.unpack_from(">i", blob, 0)[0]):
        return decode_nifti(blob)
    raise FormatError("unrecognised volume file (neither native magic nor NIfTI-1 header)", 0)


def write_volume(vol: LabelVolume, path: str | os.PathLike) -> None:
    """Write NIfTI-1 for ``.nii`` paths, the native format otherwise."""
    blob = encode_nifti(vol) if str(path).endswith(".nii") else encode_native(vol)
    with open(path, "wb") as fh:
        fh.write(blob)
