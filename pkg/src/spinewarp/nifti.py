"""Minimal NIfTI-1 single-file reader/writer.

Supports little-endian .nii / .nii.gz with datatype codes 2 (uint8),
4 (int16) and 16 (float32) and an axis-aligned affine (spacing + origin
only). Sheared or rotated affines, other datatypes and malformed headers are
rejected with a descriptive NiftiError. Round trips are bit-exact.
"""

from __future__ import annotations

import gzip

import numpy as np

from .volume import LabelVolume, ScalarVolume, VolumeGeometry

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DTYPE_CODES = {2: np.uint8, 4: np.int16, 16: np.float32}
CODE_OF_DTYPE = {np.dtype(v): k for k, v in DTYPE_CODES.items()}

_HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "<i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "<i4"),
        ("session_error", "<i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "<i2", (8,)),
        ("intent_p1", "<f4"),
        ("intent_p2", "<f4"),
        ("intent_p3", "<f4"),
        ("intent_code", "<i2"),
        ("datatype", "<i2"),
        ("bitpix", "<i2"),
        ("slice_start", "<i2"),
        ("pixdim", "<f4", (8,)),
        ("vox_offset", "<f4"),
        ("scl_slope", "<f4"),
        ("scl_inter", "<f4"),
        ("slice_end", "<i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "<f4"),
        ("cal_min", "<f4"),
        ("slice_duration", "<f4"),
        ("toffset", "<f4"),
        ("glmax", "<i4"),
        ("glmin", "<i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "<i2"),
        ("sform_code", "<i2"),
        ("quatern_b", "<f4"),
        ("quatern_c", "<f4"),
        ("quatern_d", "<f4"),
        ("qoffset_x", "<f4"),
        ("qoffset_y", "<f4"),
        ("qoffset_z", "<f4"),
        ("srow_x", "<f4", (4,)),
        ("srow_y", "<f4", (4,)),
        ("srow_z", "<f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert _HEADER_DTYPE.itemsize == HEADER_SIZE


class NiftiError(ValueError):
    """Unsupported or malformed NIfTI file."""


def _open(path, mode):
    path = str(path)
    if path.endswith(".gz"):
        if "w" in mode:
            # pinned mtime: identical volumes produce byte-identical files
            return gzip.GzipFile(path, mode, mtime=0)
        return gzip.open(path, mode)
    return open(path, mode)


def _geometry_from_header(hdr) -> VolumeGeometry:
    dim = hdr["dim"]
    if dim[0] < 3 or dim[0] > 7:
        raise NiftiError(f"unsupported dim[0]={dim[0]} (need a 3D volume)")
    if dim[0] > 3 and np.any(dim[4 : dim[0] + 1] > 1):
        raise NiftiError("4D+ volumes are not supported")
    dims = tuple(int(n) for n in dim[1:4])
    if any(n < 1 for n in dims):
        raise NiftiError(f"non-positive dims {dims}")

    if hdr["sform_code"] > 0:
        srow = np.array([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]], dtype=np.float64)
        rot = srow[:, :3]
        off_diag = rot - np.diag(np.diag(rot))
        if np.max(np.abs(off_diag)) > 1e-5 * max(1.0, np.max(np.abs(rot))):
            raise NiftiError("sheared or rotated sform affine is not supported")
        spacing = np.diag(rot)
        if np.any(spacing <= 0):
            raise NiftiError(f"non-positive sform spacing {tuple(spacing)}")
        origin = srow[:, 3]
    elif hdr["qform_code"] > 0:
        quat = (float(hdr["quatern_b"]), float(hdr["quatern_c"]), float(hdr["quatern_d"]))
        if max(abs(q) for q in quat) > 1e-6:
            raise NiftiError("rotated qform affine is not supported")
        spacing = np.abs(hdr["pixdim"][1:4]).astype(np.float64)
        origin = np.array(
            [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]], dtype=np.float64
        )
    else:
        spacing = np.abs(hdr["pixdim"][1:4]).astype(np.float64)
        spacing[spacing == 0] = 1.0
        origin = np.zeros(3)
    if np.any(spacing <= 0):
        raise NiftiError(f"non-positive spacing {tuple(spacing)}")
    return VolumeGeometry(dims, tuple(spacing), tuple(origin))


def read_nifti(path, labels: bool = False):
    """Read a NIfTI-1 file into a ScalarVolume (default) or LabelVolume."""
    with _open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"truncated file: {len(raw)} bytes < {HEADER_SIZE}-byte header")
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=_HEADER_DTYPE)[0]
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        raise NiftiError(
            f"bad sizeof_hdr {int(hdr['sizeof_hdr'])} (big-endian or not a NIfTI-1 file)"
        )
    if hdr["magic"][:3] != MAGIC[:3]:
        raise NiftiError(f"bad magic {bytes(hdr['magic'])!r}, expected n+1")
    code = int(hdr["datatype"])
    if code not in DTYPE_CODES:
        raise NiftiError(f"unsupported datatype code {code} (supported: 2, 4, 16)")
    dtype = np.dtype(DTYPE_CODES[code]).newbyteorder("<")
    geometry = _geometry_from_header(hdr)

    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        raise NiftiError(f"bad vox_offset {offset}")
    nbytes = int(np.prod(geometry.dims)) * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise NiftiError(f"truncated data: need {offset + nbytes} bytes, got {len(raw)}")
    data = np.frombuffer(raw[offset : offset + nbytes], dtype=dtype)
    data = data.reshape(geometry.dims, order="F")

    if labels:
        if not np.issubdtype(dtype, np.integer):
            raise NiftiError(f"label volume requires integer datatype, got code {code}")
        return LabelVolume(geometry, data.astype(np.int16))
    return ScalarVolume(geometry, data.astype(np.float32))


def write_nifti(vol, path, dtype=None) -> None:
    """Write a volume as little-endian single-file NIfTI-1 (gzip iff path ends .gz).

    dtype may be uint8, int16 or float32; defaults to float32 for scalars and
    uint8 for labels. Values that the target dtype cannot represent exactly
    are an error, keeping round trips bit-exact.
    """
    if dtype is None:
        dtype = np.uint8 if isinstance(vol, LabelVolume) else np.float32
    dtype = np.dtype(dtype)
    if dtype not in CODE_OF_DTYPE:
        raise NiftiError(f"unsupported write dtype {dtype} (supported: uint8, int16, float32)")
    data = vol.data if isinstance(vol, (ScalarVolume, LabelVolume)) else None
    if data is None:
        raise NiftiError(f"cannot write {type(vol).__name__} as NIfTI")
    cast = data.astype(dtype)
    if not np.array_equal(cast.astype(data.dtype), data):
        raise NiftiError(f"data not exactly representable as {dtype}")

    geom = vol.geometry
    hdr = np.zeros((), dtype=_HEADER_DTYPE)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"][0] = 3
    hdr["dim"][1:4] = geom.dims
    hdr["dim"][4:] = 1
    hdr["datatype"] = CODE_OF_DTYPE[dtype]
    hdr["bitpix"] = dtype.itemsize * 8
    hdr["pixdim"][0] = 1.0
    hdr["pixdim"][1:4] = geom.spacing
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # NIFTI_UNITS_MM
    hdr["sform_code"] = 1
    hdr["srow_x"] = (geom.spacing[0], 0, 0, geom.origin[0])
    hdr["srow_y"] = (0, geom.spacing[1], 0, geom.origin[1])
    hdr["srow_z"] = (0, 0, geom.spacing[2], geom.origin[2])
    hdr["magic"] = MAGIC

    with _open(path, "wb") as f:
        f.write(hdr.tobytes())
        f.write(b"\x00\x00\x00\x00")  # no header extensions
        f.write(np.asfortranarray(cast).tobytes(order="F"))
