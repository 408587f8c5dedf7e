"""NIfTI-1 single-file (.nii) reader and writer.

Scope: 3D volumes, datatype codes 2 (uint8), 4 (int16), 8 (int32),
16 (float32), 64 (float64); both endiannesses on read, little-endian on
write; scl_slope/scl_inter scaling applied on read. The 348-byte header is
packed by hand; the voxel payload is stored x-fastest, so arrays are
transposed at this boundary (in memory volumes are indexed [x, y, z]).
"""
from __future__ import annotations

import struct

import numpy as np

from . import FormatError
from .volume import LabelVolume, Volume3D

HEADER_SIZE = 348
MAGIC = b"n+1\x00"

# code -> numpy dtype (endian applied at use site)
_DTYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8"}
_BITPIX = {2: 8, 4: 16, 8: 32, 16: 32, 64: 64}

_FMT = "".join([
    "i",     # sizeof_hdr
    "10s",   # data_type
    "18s",   # db_name
    "i",     # extents
    "h",     # session_error
    "B",     # regular
    "B",     # dim_info
    "8h",    # dim
    "3f",    # intent_p1..p3
    "h",     # intent_code
    "h",     # datatype
    "h",     # bitpix
    "h",     # slice_start
    "8f",    # pixdim
    "f",     # vox_offset
    "f",     # scl_slope
    "f",     # scl_inter
    "h",     # slice_end
    "B",     # slice_code
    "B",     # xyzt_units
    "f",     # cal_max
    "f",     # cal_min
    "f",     # slice_duration
    "f",     # toffset
    "i",     # glmax
    "i",     # glmin
    "80s",   # descrip
    "24s",   # aux_file
    "h",     # qform_code
    "h",     # sform_code
    "3f",    # quatern_b, c, d
    "3f",    # qoffset_x, y, z
    "4f",    # srow_x
    "4f",    # srow_y
    "4f",    # srow_z
    "16s",   # intent_name
    "4s",    # magic
])
assert struct.calcsize("<" + _FMT) == HEADER_SIZE


def write_nifti(vol, path):
    """Write a Volume3D (float32) or LabelVolume (uint8/uint32) as .nii.

    uint32 labels are stored as int32 (code 8); values must fit.
    """
    if isinstance(vol, Volume3D):
        data = vol.data
        code = 16
    elif isinstance(vol, LabelVolume):
        if vol.data.dtype == np.uint8:
            data = vol.data
            code = 2
        else:
            if vol.data.max(initial=0) > np.iinfo(np.int32).max:
                raise FormatError("label ids exceed the int32 payload range")
            data = vol.data.astype(np.int32)
            code = 8
    else:
        raise TypeError(f"cannot serialize {type(vol).__name__}")

    dims = data.shape
    sp = vol.spacing
    org = vol.origin
    dim = (3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    pixdim = (1.0, sp[0], sp[1], sp[2], 0.0, 0.0, 0.0, 0.0)
    srow_x = (sp[0], 0.0, 0.0, org[0])
    srow_y = (0.0, sp[1], 0.0, org[1])
    srow_z = (0.0, 0.0, sp[2], org[2])

    header = struct.pack(
        "<" + _FMT,
        HEADER_SIZE, b"", b"", 0, 0, ord("r"), 0,
        *dim,
        0.0, 0.0, 0.0, 0,
        code, _BITPIX[code], 0,
        *pixdim,
        352.0, 1.0, 0.0,
        0, 0, 2,                      # xyzt_units: mm
        0.0, 0.0, 0.0, 0.0, 0, 0,
        b"vesselforge", b"",
        0, 1,                         # qform 0, sform 1
        0.0, 0.0, 0.0,
        org[0], org[1], org[2],
        *srow_x, *srow_y, *srow_z,
        b"", MAGIC,
    )
    payload = np.ascontiguousarray(data.transpose(2, 1, 0))
    if payload.dtype.byteorder == ">":
        payload = payload.byteswap()
    with open(path, "wb") as f:
        f.write(header)
        f.write(b"\x00\x00\x00\x00")  # no header extensions
        f.write(payload.tobytes())


def read_nifti(path):
    """Read a .nii file into a Volume3D or LabelVolume.

    Code 2 maps to LabelVolume uint8, code 8 to LabelVolume uint32
    (negative values rejected); codes 4/16/64 map to Volume3D float32.
    Any nontrivial scl_slope/scl_inter forces a Volume3D.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < HEADER_SIZE:
        raise FormatError(
            f"{path}: truncated header ({len(blob)} bytes, need {HEADER_SIZE})")

    (le_size,) = struct.unpack_from("<i", blob, 0)
    (be_size,) = struct.unpack_from(">i", blob, 0)
    if le_size == HEADER_SIZE:
        endian = "<"
    elif be_size == HEADER_SIZE:
        endian = ">"
    else:
        raise FormatError(
            f"{path}: sizeof_hdr at offset 0 is {le_size} (LE) / {be_size} (BE); "
            f"expected {HEADER_SIZE}")

    fields = struct.unpack_from(endian + _FMT, blob, 0)
    dim = fields[7:15]
    datatype = fields[19]
    bitpix = fields[20]
    pixdim = fields[22:30]
    vox_offset = int(round(fields[30]))
    scl_slope = fields[31]
    scl_inter = fields[32]
    sform_code = fields[45]
    qoffset = fields[49:52]
    srow_x = fields[52:56]
    srow_y = fields[56:60]
    srow_z = fields[60:64]
    magic = fields[65]

    if magic != MAGIC:
        raise FormatError(
            f"{path}: bad magic {magic!r} at offset 344 (expected {MAGIC!r})")
    ndim = dim[0]
    if ndim < 3 or ndim > 7:
        raise FormatError(f"{path}: dim[0]={ndim} outside [3, 7]")
    if any(d not in (0, 1) for d in dim[4:1 + ndim]):
        raise FormatError(f"{path}: non-singleton trailing dims {dim[4:1 + ndim]}")
    dims = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in dims):
        raise FormatError(f"{path}: non-positive dims {dims}")
    if datatype not in _DTYPES:
        raise FormatError(f"{path}: unsupported datatype code {datatype}")
    if bitpix != _BITPIX[datatype]:
        raise FormatError(
            f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")
    spacing = tuple(float(p) for p in pixdim[1:4])
    if any(s <= 0 for s in spacing):
        raise FormatError(f"{path}: non-positive pixdim {spacing}")
    if vox_offset < HEADER_SIZE:
        raise FormatError(f"{path}: vox_offset {vox_offset} < {HEADER_SIZE}")

    dt = np.dtype(endian + _DTYPES[datatype])
    nbytes = int(np.prod(dims)) * dt.itemsize
    if len(blob) < vox_offset + nbytes:
        raise FormatError(
            f"{path}: payload needs {nbytes} bytes at offset {vox_offset}, "
            f"file has {len(blob) - vox_offset}")
    flat = np.frombuffer(blob, dtype=dt, count=int(np.prod(dims)),
                         offset=vox_offset)
    # stored x-fastest: file order is [z][y][x]
    arr = np.ascontiguousarray(
        flat.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0))
    if arr.dtype.byteorder == ">":
        arr = arr.byteswap().view(arr.dtype.newbyteorder("<"))

    if sform_code > 0:
        origin = (float(srow_x[3]), float(srow_y[3]), float(srow_z[3]))
    else:
        origin = tuple(float(q) for q in qoffset)

    scaled = scl_slope not in (0.0,) and (scl_slope != 1.0 or scl_inter != 0.0)
    if scaled:
        arr = arr.astype(np.float32) * np.float32(scl_slope) + np.float32(scl_inter)
        return Volume3D(arr, spacing, origin)
    if datatype == 2:
        return LabelVolume(arr, spacing, origin)
    if datatype == 8:
        if arr.min(initial=0) < 0:
            raise FormatError(
                f"{path}: negative values in integer label payload")
        return LabelVolume(arr.astype(np.uint32), spacing, origin)
    return Volume3D(arr.astype(np.float32), spacing, origin)
