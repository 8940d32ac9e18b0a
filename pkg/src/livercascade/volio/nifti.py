"""Minimal little-endian NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Only the fields needed to carry volumes and probability maps are honoured:
``dim``, ``datatype``, ``bitpix``, ``pixdim``, ``vox_offset`` and the scaling pair.
Orientation (qform/sform) is written as a plain diagonal and ignored on read.

NIfTI stores the i (x) axis fastest. Reading the payload as a C-order array of
shape ``(Z, Y, X)`` (or ``(T, Z, Y, X)``) therefore needs no transpose, and
flat indices agree with the package-wide ``(z*Y + y)*X + x`` convention.
"""

from __future__ import annotations

import gzip
import io
import struct
from pathlib import Path

import numpy as np

from ..core import NUM_CHANNELS, PROB_SUM_TOLERANCE, ProbMaps, VoxelGrid
from ..errors import (
    BadMagicError,
    ChannelCountError,
    DimMismatchError,
    GeometryError,
    InvalidProbabilityError,
    ParseError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
)

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DATATYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.float32): 16}

# byte offsets inside the 348-byte header
_OFF_DIM = 40
_OFF_DATATYPE = 70
_OFF_BITPIX = 72
_OFF_PIXDIM = 76
_OFF_VOX_OFFSET = 108
_OFF_SCL = 112
_OFF_XYZT_UNITS = 123
_OFF_SFORM_CODE = 254
_OFF_SROW = 280
_OFF_MAGIC = 344


def _float32_decimal(value) -> float:
    """Shortest decimal that round-trips the float32, e.g. 0.7f -> 0.7."""
    return float(str(np.float32(value)))


def _build_header(shape_xyzt: tuple[int, ...], spacing_xyz: tuple[float, float, float], dtype: np.dtype) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[38] = ord("r")
    dim = [len(shape_xyzt), *shape_xyzt] + [1] * (7 - len(shape_xyzt))
    struct.pack_into("<8h", hdr, _OFF_DIM, *dim)
    code = _CODES[dtype]
    struct.pack_into("<hh", hdr, _OFF_DATATYPE, code, dtype.itemsize * 8)
    pixdim = [1.0, *spacing_xyz, 1.0, 1.0, 1.0, 1.0]
    struct.pack_into("<8f", hdr, _OFF_PIXDIM, *pixdim)
    struct.pack_into("<f", hdr, _OFF_VOX_OFFSET, float(VOX_OFFSET))
    struct.pack_into("<ff", hdr, _OFF_SCL, 1.0, 0.0)
    hdr[_OFF_XYZT_UNITS] = 2  # mm
    struct.pack_into("<h", hdr, _OFF_SFORM_CODE, 1)
    sx, sy, sz = spacing_xyz
    srow = [sx, 0, 0, 0, 0, sy, 0, 0, 0, 0, sz, 0]
    struct.pack_into("<12f", hdr, _OFF_SROW, *srow)
    hdr[_OFF_MAGIC:_OFF_MAGIC + 4] = MAGIC
    return bytes(hdr)


def _write_bytes(path: Path, payload: bytes) -> None:
    if path.name.endswith(".gz"):
        buf = io.BytesIO()
        # fixed mtime and empty name keep the compressed bytes reproducible
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
            gz.write(payload)
        path.write_bytes(buf.getvalue())
    else:
        path.write_bytes(payload)


def _read_bytes(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedPayloadError(f"corrupt gzip stream in {path}: {exc}", field="payload") from exc
    return raw


def encode_nifti(array: np.ndarray, spacing_zyx) -> bytes:
    """Serialize a (Z, Y, X) or (T, Z, Y, X) array to uncompressed NIfTI-1 bytes."""
    arr = np.asarray(array)
    dtype = arr.dtype.newbyteorder("=")
    if dtype not in _CODES:
        raise UnsupportedDatatypeError(f"cannot write element type {arr.dtype}", field="datatype")
    if arr.ndim not in (3, 4):
        raise GeometryError(f"expected a 3D or 4D array, got shape {arr.shape}")
    sz, sy, sx = (_float32_decimal(s) for s in spacing_zyx)
    shape_xyzt = tuple(reversed(arr.shape))
    header = _build_header(shape_xyzt, (sx, sy, sz), np.dtype(dtype))
    payload = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes(order="C")
    return header + b"\x00\x00\x00\x00" + payload


def decode_nifti(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, tuple[float, float, float]]:
    """Parse NIfTI-1 bytes into a C-order array (Z,Y,X) or (T,Z,Y,X) and (sz, sy, sx)."""
    if len(raw) < HEADER_SIZE:
        raise TruncatedPayloadError(f"{source}: only {len(raw)} bytes, header needs {HEADER_SIZE}", field="sizeof_hdr")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise BadMagicError(
            f"{source}: sizeof_hdr is {sizeof_hdr} (big-endian or not NIfTI-1)", field="sizeof_hdr"
        )
    magic = raw[_OFF_MAGIC:_OFF_MAGIC + 4]
    if magic != MAGIC:
        raise BadMagicError(f"{source}: magic {magic!r} is not single-file NIfTI-1 'n+1\\0'", field="magic")
    dim = struct.unpack_from("<8h", raw, _OFF_DIM)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise DimMismatchError(f"{source}: dim[0]={ndim}, only 3 or 4 supported", field="dim[0]")
    shape_xyzt = dim[1:1 + ndim]
    if min(shape_xyzt) <= 0:
        raise DimMismatchError(f"{source}: non-positive extent in dim={dim[:ndim + 1]}", field="dim")
    datatype, bitpix = struct.unpack_from("<hh", raw, _OFF_DATATYPE)
    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"{source}: datatype code {datatype} not in {{2, 4, 16}}", field="datatype")
    dtype = DATATYPES[datatype]
    if bitpix != dtype.itemsize * 8:
        raise UnsupportedDatatypeError(
            f"{source}: bitpix {bitpix} inconsistent with datatype {datatype}", field="bitpix"
        )
    pixdim = struct.unpack_from("<8f", raw, _OFF_PIXDIM)
    (vox_offset,) = struct.unpack_from("<f", raw, _OFF_VOX_OFFSET)
    offset = int(vox_offset)
    if offset < HEADER_SIZE or offset != vox_offset:
        raise ParseError(f"{source}: invalid vox_offset {vox_offset}", field="vox_offset")
    count = int(np.prod(shape_xyzt))
    need = offset + count * dtype.itemsize
    if len(raw) < need:
        raise TruncatedPayloadError(
            f"{source}: payload has {len(raw) - offset} bytes, dims {shape_xyzt} need {count * dtype.itemsize}",
            field="payload",
        )
    if len(raw) > need:
        raise DimMismatchError(
            f"{source}: {len(raw) - need} trailing bytes beyond dims {shape_xyzt}", field="dim"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(tuple(reversed(shape_xyzt)))
    data = data.astype(dtype.newbyteorder("="), copy=True)
    slope, inter = struct.unpack_from("<ff", raw, _OFF_SCL)
    if slope != 0 and not (slope == 1 and inter == 0):
        data = (data.astype(np.float32) * np.float32(slope) + np.float32(inter)).astype(np.float32)
    sx, sy, sz = (_float32_decimal(p) for p in pixdim[1:4])
    for name, s in (("pixdim[1]", sx), ("pixdim[2]", sy), ("pixdim[3]", sz)):
        if not np.isfinite(s) or s <= 0:
            raise GeometryError(f"{source}: {name}={s} must be finite and > 0")
    return data, (sz, sy, sx)


def read_volume(path) -> VoxelGrid:
    path = Path(path)
    data, spacing = decode_nifti(_read_bytes(path), source=str(path))
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise DimMismatchError(f"{path}: 4D file with dim[4]={data.shape[0]} is not a single volume", field="dim[4]")
        data = data[0]
    return VoxelGrid(data, spacing)


def write_volume(grid: VoxelGrid, path) -> None:
    _write_bytes(Path(path), encode_nifti(grid.data, grid.spacing))


def write_probmaps(prob: ProbMaps, path) -> None:
    _write_bytes(Path(path), encode_nifti(prob.data, prob.spacing))


def normalize_channels(data: np.ndarray, tol: float = PROB_SUM_TOLERANCE, inplace: bool = False) -> np.ndarray:
    """Rescale each voxel's channels to sum to one.

    Voxels already within ``1 +- tol`` are left untouched. Slightly negative
    values (down to ``-tol``) are clipped to zero; anything lower is rejected.
    A voxel with all-zero channels becomes pure background.
    """
    data = np.asarray(data, dtype=np.float32)
    if data.size and data.min() < -tol:
        raise InvalidProbabilityError(f"channel value {float(data.min())} below -{tol}")
    if not np.isfinite(data).all():
        raise InvalidProbabilityError("non-finite channel values")
    out = np.maximum(data, 0, out=data if inplace else None)
    sums = out.sum(axis=0, dtype=np.float64)
    off = np.abs(sums - 1.0) > tol
    if off.any():
        zero = sums == 0
        if zero.any():
            out[0][zero] = 1.0
            sums = np.where(zero, 1.0, sums)
        scale = np.where(off & ~zero, 1.0 / sums, 1.0).astype(np.float32)
        out *= scale[None]
    return out


def read_probmaps(path) -> ProbMaps:
    path = Path(path)
    data, spacing = decode_nifti(_read_bytes(path), source=str(path))
    if data.ndim != 4 or data.shape[0] != NUM_CHANNELS:
        got = data.shape[0] if data.ndim == 4 else 1
        raise ChannelCountError(f"{path}: expected {NUM_CHANNELS} channels, found {got}", field="dim[4]")
    if data.dtype != np.float32:
        raise ParseError(f"{path}: probability maps must be float32, got {data.dtype}", field="datatype")
    return ProbMaps(normalize_channels(data, inplace=True), spacing)
