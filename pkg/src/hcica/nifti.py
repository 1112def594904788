"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Supports little- and big-endian input, int16/float32/float64 payloads and
scl_slope/scl_inter scaling on read. Output is always a little-endian
float32 single-file volume whose geometry fields are copied from a
reference header.
"""

from __future__ import annotations

import gzip
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedDatatypeError

HEADER_SIZE = 348
MAGIC = b"n+1\x00"

HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "i4"),
        ("session_error", "i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "i2", (8,)),
        ("intent_p1", "f4"),
        ("intent_p2", "f4"),
        ("intent_p3", "f4"),
        ("intent_code", "i2"),
        ("datatype", "i2"),
        ("bitpix", "i2"),
        ("slice_start", "i2"),
        ("pixdim", "f4", (8,)),
        ("vox_offset", "f4"),
        ("scl_slope", "f4"),
        ("scl_inter", "f4"),
        ("slice_end", "i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "f4"),
        ("cal_min", "f4"),
        ("slice_duration", "f4"),
        ("toffset", "f4"),
        ("glmax", "i4"),
        ("glmin", "i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "i2"),
        ("sform_code", "i2"),
        ("quatern_b", "f4"),
        ("quatern_c", "f4"),
        ("quatern_d", "f4"),
        ("qoffset_x", "f4"),
        ("qoffset_y", "f4"),
        ("qoffset_z", "f4"),
        ("srow_x", "f4", (4,)),
        ("srow_y", "f4", (4,)),
        ("srow_z", "f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert HEADER_DTYPE.itemsize == HEADER_SIZE

# NIfTI datatype codes accepted on read
DTYPE_CODES = {4: np.dtype("i2"), 16: np.dtype("f4"), 64: np.dtype("f8")}
FLOAT32_CODE = 16


def _open_maybe_gzip(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_nifti(path):
    """Read a NIfTI-1 file.

    Returns
    -------
    data : float64 ndarray with shape dim[1:1+dim[0]] (Fortran voxel order)
    header : structured scalar (native little-endian copy of the header)
    """
    raw = _open_maybe_gzip(path)
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    header = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE)[0]
    swapped = False
    if header["sizeof_hdr"] != HEADER_SIZE:
        # reinterpret as big-endian; scalar byteswap() does not swap per field
        header = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(">"))[0]
        swapped = True
        if header["sizeof_hdr"] != HEADER_SIZE:
            raise FormatError(f"{path}: bad sizeof_hdr, not a NIfTI-1 file")
    # numpy S-fields strip trailing NULs, so compare the first three bytes
    if bytes(header["magic"])[:3] != MAGIC[:3]:
        raise FormatError(f"{path}: bad magic bytes {bytes(header['magic'])!r}")

    code = int(header["datatype"])
    if code not in DTYPE_CODES:
        raise UnsupportedDatatypeError(f"{path}: unsupported NIfTI datatype code {code}")
    dt = DTYPE_CODES[code]
    if swapped:
        dt = dt.newbyteorder()

    ndim = int(header["dim"][0])
    if not 1 <= ndim <= 4:
        raise FormatError(f"{path}: unsupported dim[0]={ndim}")
    shape = tuple(int(d) for d in header["dim"][1 : 1 + ndim])
    if any(d < 1 for d in shape):
        raise FormatError(f"{path}: non-positive dimension in {shape}")
    count = int(np.prod(shape))

    offset = int(header["vox_offset"])
    payload = raw[offset : offset + count * dt.itemsize]
    if len(payload) < count * dt.itemsize:
        raise FormatError(f"{path}: truncated data section")
    data = np.frombuffer(payload, dtype=dt).astype(np.float64)
    data = data.reshape(shape, order="F")

    slope = float(header["scl_slope"])
    inter = float(header["scl_inter"])
    if slope != 0.0:
        data = data * slope + inter

    # hand back a native little-endian header copy
    if swapped:
        header = np.array(header).astype(HEADER_DTYPE)[()]
    else:
        header = header.copy()
    return data, header


def default_header(dims3, pixdim=(1.0, 1.0, 1.0)):
    """A fresh header for synthetic volumes with identity-like geometry."""
    hdr = np.zeros((), dtype=HEADER_DTYPE)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"][0] = 3
    hdr["dim"][1:4] = dims3
    hdr["dim"][4:] = 1
    hdr["datatype"] = FLOAT32_CODE
    hdr["bitpix"] = 32
    hdr["pixdim"][0] = 1.0
    hdr["pixdim"][1:4] = pixdim
    hdr["vox_offset"] = 352.0
    hdr["sform_code"] = 1
    hdr["srow_x"] = [pixdim[0], 0, 0, 0]
    hdr["srow_y"] = [0, pixdim[1], 0, 0]
    hdr["srow_z"] = [0, 0, pixdim[2], 0]
    hdr["magic"] = MAGIC
    return hdr[()]


def write_nifti(path, data, reference_header=None):
    """Write `data` (3D or 4D float array) as a float32 NIfTI-1 file.

    Geometry (pixdim, qform/sform) is copied from `reference_header` when
    given; datatype, dims and scaling fields are rewritten.
    """
    data = np.asarray(data)
    if data.ndim not in (3, 4):
        raise FormatError(f"can only write 3D/4D volumes, got ndim={data.ndim}")

    if reference_header is not None:
        hdr = np.asarray(reference_header, dtype=HEADER_DTYPE).copy()[()]
    else:
        hdr = default_header(data.shape[:3])
    hdr = np.array(hdr, dtype=HEADER_DTYPE)  # mutable 0-d copy
    hdr["dim"][:] = 1
    hdr["dim"][0] = data.ndim
    hdr["dim"][1 : 1 + data.ndim] = data.shape
    hdr["datatype"] = FLOAT32_CODE
    hdr["bitpix"] = 32
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 0.0
    hdr["scl_inter"] = 0.0
    hdr["magic"] = MAGIC

    payload = np.asfortranarray(data, dtype="<f4").tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(b"\x00" * 4)  # extension flag
        fh.write(payload)


def world_affine(header):
    """4x4 voxel-to-world transform from sform (or pixdim fallback)."""
    hdr = np.asarray(header, dtype=HEADER_DTYPE)[()]
    aff = np.eye(4)
    if int(hdr["sform_code"]) > 0:
        aff[0, :] = hdr["srow_x"]
        aff[1, :] = hdr["srow_y"]
        aff[2, :] = hdr["srow_z"]
    else:
        aff[0, 0], aff[1, 1], aff[2, 2] = np.abs(hdr["pixdim"][1:4])
    return aff
