"""VSEG native volume files, a minimal NIfTI-1 reader, and mask export.

VSEG layout (little-endian)::

    0   magic   b"VSEG"
    4   version u32 (= 1)
    8   dtype   u8  (0 = float32 image, 1 = uint8 mask)
    9   reserved u8 x 3 (= 0)
    12  D, H, W u32 x 3
    24  sz, sy, sx float32 x 3 (mm)
    36  payload, row-major with W fastest
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

VSEG_MAGIC = b"VSEG"
VSEG_VERSION = 1
VSEG_HEADER = struct.Struct("<4sIB3x3I3f")
VSEG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


class ParseError(ValueError):
    """Malformed binary input; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NotNiftiError(ParseError):
    pass


class UnsupportedDatatypeError(ParseError):
    def __init__(self, code: int, offset: int):
        super().__init__(f"unsupported NIfTI datatype code {code}", offset)
        self.code = code


class DimensionalityError(ParseError):
    pass


class TruncatedError(ParseError):
    pass


def write_vseg(data: np.ndarray, spacing, path) -> None:
    arr = np.asarray(data)
    if arr.ndim != 3:
        raise ValueError(f"VSEG stores 3-D volumes, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        code = 1
    elif arr.dtype == np.float32:
        code = 0
    else:
        raise ValueError(f"VSEG stores float32 images or uint8 masks, got {arr.dtype}")
    sz, sy, sx = (float(s) for s in spacing)
    header = VSEG_HEADER.pack(VSEG_MAGIC, VSEG_VERSION, code, *arr.shape, sz, sy, sx)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr, dtype=VSEG_DTYPES[code]).tobytes())


def parse_vseg(buf: bytes) -> tuple[np.ndarray, tuple[float, float, float]]:
    if len(buf) < 4 or buf[:4] != VSEG_MAGIC:
        raise ParseError(f"bad magic {bytes(buf[:4])!r}", 0)
    if len(buf) < VSEG_HEADER.size:
        raise TruncatedError(f"header needs {VSEG_HEADER.size} bytes, file has {len(buf)}", len(buf))
    _, version, code, D, H, W, sz, sy, sx = VSEG_HEADER.unpack_from(buf)
    if version != VSEG_VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    if code not in VSEG_DTYPES:
        raise ParseError(f"unknown dtype code {code}", 8)
    if buf[9:12] != b"\0\0\0":
        raise ParseError("reserved bytes must be zero", 9)
    if min(D, H, W) < 1:
        raise ParseError(f"extents must be >= 1, got {(D, H, W)}", 12)
    dt = VSEG_DTYPES[code]
    need = D * H * W * dt.itemsize
    have = len(buf) - VSEG_HEADER.size
    if have != need:
        raise ParseError(f"payload length {have} != expected {need}", VSEG_HEADER.size + min(have, need))
    data = np.frombuffer(buf, dtype=dt, count=D * H * W, offset=VSEG_HEADER.size).reshape(D, H, W)
    return data.astype(dt.newbyteorder("="), copy=True), (float(sz), float(sy), float(sx))


def read_vseg(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    return parse_vseg(Path(path).read_bytes())


def export_prediction(mask: np.ndarray, spacing, path) -> None:
    """Write a binary mask as a uint8 VSEG file."""
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("export_prediction expects a binary mask with values in {0, 1}")
    write_vseg(m.astype(np.uint8), spacing, path)


# ---------------------------------------------------------------------------
# NIfTI-1 (uncompressed, 3-D, uint8 / int16 / float32)
# ---------------------------------------------------------------------------

NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("i2"), 16: np.dtype("f4")}
_OFF_DIM, _OFF_DATATYPE, _OFF_PIXDIM, _OFF_VOX_OFFSET, _OFF_MAGIC = 40, 70, 76, 108, 344


def parse_nifti_header(buf: bytes) -> dict:
    if len(buf) < 348:
        raise TruncatedError(f"NIfTI-1 header needs 348 bytes, got {len(buf)}", len(buf))
    for endian in ("<", ">"):
        if struct.unpack_from(endian + "i", buf, 0)[0] == 348:
            break
    else:
        raise NotNiftiError(f"not NIfTI-1: sizeof_hdr = {struct.unpack_from('<i', buf, 0)[0]}", 0)
    dim = struct.unpack_from(endian + "8h", buf, _OFF_DIM)
    datatype = struct.unpack_from(endian + "h", buf, _OFF_DATATYPE)[0]
    pixdim = struct.unpack_from(endian + "8f", buf, _OFF_PIXDIM)
    vox_offset = struct.unpack_from(endian + "f", buf, _OFF_VOX_OFFSET)[0]
    magic = bytes(buf[_OFF_MAGIC:_OFF_MAGIC + 4])
    if magic not in (b"n+1\0", b"ni1\0"):
        raise NotNiftiError(f"bad NIfTI-1 magic {magic!r}", _OFF_MAGIC)
    if dim[0] != 3:
        raise DimensionalityError(f"expected a 3-D volume, dim[0] = {dim[0]}", _OFF_DIM)
    if min(dim[1:4]) < 1:
        raise DimensionalityError(f"spatial extents must be >= 1, got {dim[1:4]}", _OFF_DIM + 2)
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedDatatypeError(datatype, _OFF_DATATYPE)
    if magic == b"n+1\0" and vox_offset < 348:
        raise ParseError(f"vox_offset {vox_offset} < 348 for single-file NIfTI", _OFF_VOX_OFFSET)
    return {"endian": endian, "dim": dim, "datatype": datatype, "pixdim": pixdim,
            "vox_offset": int(vox_offset), "magic": magic}


def parse_nifti(buf: bytes, payload: bytes | None = None) -> tuple[np.ndarray, tuple[float, float, float]]:
    hdr = parse_nifti_header(buf)
    nx, ny, nz = hdr["dim"][1:4]
    dt = NIFTI_DTYPES[hdr["datatype"]].newbyteorder(hdr["endian"])
    count = nx * ny * nz
    src, start = (buf, hdr["vox_offset"]) if payload is None else (payload, hdr["vox_offset"])
    need = count * dt.itemsize
    if len(src) < start + need:
        raise TruncatedError(f"payload needs {need} bytes from offset {start}, have {max(len(src) - start, 0)}",
                             len(src))
    vol = np.frombuffer(src, dtype=dt, count=count, offset=start).reshape(nz, ny, nx).astype(np.float32)
    lo, hi = float(vol.min()), float(vol.max())
    vol = np.zeros_like(vol) if hi == lo else ((vol - lo) / (hi - lo)).astype(np.float32)
    pd = hdr["pixdim"]
    return vol, (float(pd[3]), float(pd[2]), float(pd[1]))


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Volume ``[D, H, W]`` normalised to [0, 1] plus spacing (sz, sy, sx) in mm."""
    path = Path(path)
    buf = path.read_bytes()
    hdr = parse_nifti_header(buf)
    if hdr["magic"] == b"ni1\0":
        img = path.with_suffix(".img")
        return parse_nifti(buf, img.read_bytes())
    return parse_nifti(buf)


def build_nifti(volume: np.ndarray, spacing=(1.0, 1.0, 1.0), datatype: int = 16,
                vox_offset: int = 352) -> bytes:
    """Serialise a ``[D, H, W]`` array as single-file little-endian NIfTI-1 bytes."""
    vol = np.asarray(volume)
    nz, ny, nx = vol.shape
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, _OFF_DIM, 3, nx, ny, nz, 1, 1, 1, 1)
    dt = NIFTI_DTYPES[datatype] if datatype in NIFTI_DTYPES else np.dtype("f8")
    struct.pack_into("<h", hdr, _OFF_DATATYPE, datatype)
    struct.pack_into("<h", hdr, 72, dt.itemsize * 8)
    sz, sy, sx = spacing
    struct.pack_into("<8f", hdr, _OFF_PIXDIM, 0.0, sx, sy, sz, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, _OFF_VOX_OFFSET, float(vox_offset))
    hdr[_OFF_MAGIC:_OFF_MAGIC + 4] = b"n+1\0"
    pad = b"\0" * (vox_offset - 348)
    return bytes(hdr) + pad + np.ascontiguousarray(vol, dtype=dt.newbyteorder("<")).tobytes()


def read_volume(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Dispatch on extension: ``.vseg`` or NIfTI (``.nii`` / ``.hdr``)."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".vseg":
        data, spacing = read_vseg(path)
        return data.astype(np.float32), spacing
    return read_nifti(path)
