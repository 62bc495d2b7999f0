"""Read and write single-file NIfTI-1 volumes (``.nii`` / ``.nii.gz``).

Only axis-aligned 3D scalar images are supported. Axis flips in the affine
are normalized away on read (the data is flipped so that every spacing is
positive), oblique or permuted orientations are rejected.
"""
from __future__ import annotations

import gzip
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .volume import Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
GZIP_MAGIC = b"\x1f\x8b"
ORIENTATION_TOL = 1e-3

DT_UINT8, DT_INT16, DT_INT32, DT_FLOAT32, DT_FLOAT64 = 2, 4, 8, 16, 64
_DTYPES = {
    DT_UINT8: np.dtype("u1"),
    DT_INT16: np.dtype("i2"),
    DT_INT32: np.dtype("i4"),
    DT_FLOAT32: np.dtype("f4"),
    DT_FLOAT64: np.dtype("f8"),
}


class NiftiError(Exception):
    pass


class FormatError(NiftiError):
    pass


class UnsupportedError(NiftiError):
    pass


class UnsupportedOrientationError(UnsupportedError):
    pass


# (name, struct code, offset) for the fields we touch; the rest stays zero.
_FIELDS = {
    "sizeof_hdr": ("i", 0),
    "dim": ("8h", 40),
    "datatype": ("h", 70),
    "bitpix": ("h", 72),
    "pixdim": ("8f", 76),
    "vox_offset": ("f", 108),
    "scl_slope": ("f", 112),
    "scl_inter": ("f", 116),
    "xyzt_units": ("B", 123),
    "qform_code": ("h", 252),
    "sform_code": ("h", 254),
    "quatern": ("3f", 256),
    "qoffset": ("3f", 268),
    "srow_x": ("4f", 280),
    "srow_y": ("4f", 296),
    "srow_z": ("4f", 312),
    "magic": ("4s", 344),
}


@dataclass
class NiftiHeader:
    dim: tuple
    datatype: int
    bitpix: int
    pixdim: tuple
    vox_offset: float
    scl_slope: float
    scl_inter: float
    qform_code: int
    sform_code: int
    quatern: tuple
    qoffset: tuple
    srow: tuple
    magic: bytes
    endian: str = "<"
    sizeof_hdr: int = HEADER_SIZE

    @classmethod
    def unpack(cls, raw: bytes) -> "NiftiHeader":
        if len(raw) < HEADER_SIZE:
            raise FormatError(f"header truncated: {len(raw)} bytes")
        endian = None
        for e in "<>":
            if struct.unpack_from(e + "i", raw, 0)[0] == HEADER_SIZE:
                endian = e
                break
        if endian is None:
            raise FormatError("sizeof_hdr is not 348 in either byte order")

        def get(name):
            code, off = _FIELDS[name]
            vals = struct.unpack_from(endian + code, raw, off)
            return vals if len(vals) > 1 else vals[0]

        return cls(
            dim=get("dim"),
            datatype=get("datatype"),
            bitpix=get("bitpix"),
            pixdim=get("pixdim"),
            vox_offset=get("vox_offset"),
            scl_slope=get("scl_slope"),
            scl_inter=get("scl_inter"),
            qform_code=get("qform_code"),
            sform_code=get("sform_code"),
            quatern=get("quatern"),
            qoffset=get("qoffset"),
            srow=(get("srow_x"), get("srow_y"), get("srow_z")),
            magic=get("magic"),
            endian=endian,
        )

    def pack(self) -> bytes:
        buf = bytearray(HEADER_SIZE)
        e = self.endian

        def put(name, value):
            code, off = _FIELDS[name]
            if isinstance(value, (tuple, list)):
                struct.pack_into(e + code, buf, off, *value)
            else:
                struct.pack_into(e + code, buf, off, value)

        put("sizeof_hdr", HEADER_SIZE)
        put("dim", self.dim)
        put("datatype", self.datatype)
        put("bitpix", self.bitpix)
        put("pixdim", self.pixdim)
        put("vox_offset", self.vox_offset)
        put("scl_slope", self.scl_slope)
        put("scl_inter", self.scl_inter)
        put("xyzt_units", 2)  # mm
        put("qform_code", self.qform_code)
        put("sform_code", self.sform_code)
        put("quatern", self.quatern)
        put("qoffset", self.qoffset)
        put("srow_x", self.srow[0])
        put("srow_y", self.srow[1])
        put("srow_z", self.srow[2])
        put("magic", self.magic)
        return bytes(buf)

    def affine(self) -> np.ndarray:
        """Voxel-to-world affine: sform if set, else qform, else pixdim scaling."""
        if self.sform_code > 0:
            a = np.eye(4)
            a[:3] = np.asarray(self.srow, dtype=np.float64)
            return a
        if self.qform_code > 0:
            return _qform_affine(self.quatern, self.qoffset, self.pixdim)
        a = np.eye(4)
        a[[0, 1, 2], [0, 1, 2]] = self.pixdim[1:4]
        return a


def _qform_affine(quatern, qoffset, pixdim) -> np.ndarray:
    b, c, d = (float(q) for q in quatern)
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 1e-7 else 0.0
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c],
            [2 * b * c + 2 * a * d, a * a + c * c - b * b - d * d, 2 * c * d - 2 * a * b],
            [2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a + d * d - c * c - b * b],
        ]
    )
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac], dtype=np.float64)
    out = np.eye(4)
    out[:3, :3] = r * zooms
    out[:3, 3] = qoffset
    return out


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def read_header(path) -> NiftiHeader:
    return NiftiHeader.unpack(_read_bytes(path)[:HEADER_SIZE])


def read_volume(path) -> Volume:
    raw = _read_bytes(path)
    hdr = NiftiHeader.unpack(raw)
    if hdr.magic != b"n+1\x00":
        raise FormatError(f"{path}: magic {hdr.magic!r} is not a single-file NIfTI-1 image")
    ndim = hdr.dim[0]
    if ndim not in (3, 4) or (ndim == 4 and hdr.dim[4] != 1):
        raise UnsupportedError(f"{path}: only 3D scalar volumes are supported, dim={hdr.dim}")
    if hdr.datatype not in _DTYPES:
        raise UnsupportedError(f"{path}: datatype code {hdr.datatype} not supported")
    dims = tuple(int(n) for n in hdr.dim[1:4])
    dtype = _DTYPES[hdr.datatype].newbyteorder(hdr.endian)
    offset = int(hdr.vox_offset)
    count = int(np.prod(dims))
    if len(raw) < offset + count * dtype.itemsize:
        raise FormatError(f"{path}: file too short for {dims} voxels of {dtype}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(dims, order="F")
    data = data.astype(dtype.newbyteorder("="))
    if hdr.scl_slope != 0 and not (hdr.scl_slope == 1 and hdr.scl_inter == 0):
        data = data.astype(np.float64) * hdr.scl_slope + hdr.scl_inter
        if hdr.datatype != DT_FLOAT64:
            data = data.astype(np.float32)

    affine = hdr.affine()
    lin = affine[:3, :3]
    norms = np.linalg.norm(lin, axis=0)
    if np.any(norms == 0):
        raise UnsupportedOrientationError(f"{path}: degenerate affine")
    cosines = lin / norms
    off_diag = cosines - np.diag(np.diag(cosines))
    if np.abs(off_diag).max() > ORIENTATION_TOL:
        raise UnsupportedOrientationError(f"{path}: oblique or permuted orientation is not supported")
    origin = affine[:3, 3].copy()
    flips = np.diag(cosines) < 0
    for axis in np.flatnonzero(flips):
        # make this axis run in +world direction: first voxel becomes the old last one
        origin[axis] = origin[axis] - (dims[axis] - 1) * norms[axis]
        data = np.flip(data, axis=axis)
    spacing = tuple(float(s) for s in norms)
    return Volume(np.ascontiguousarray(data), spacing, tuple(origin))


_WRITE_DTYPES = {np.dtype("u1"): DT_UINT8, np.dtype("i2"): DT_INT16, np.dtype("i4"): DT_INT32, np.dtype("f4"): DT_FLOAT32, np.dtype("f8"): DT_FLOAT64}


def _header_for(v: Volume, datatype: int) -> NiftiHeader:
    nx, ny, nz = v.dims
    sx, sy, sz = v.spacing
    ox, oy, oz = v.origin
    return NiftiHeader(
        dim=(3, nx, ny, nz, 1, 1, 1, 1),
        datatype=datatype,
        bitpix=_DTYPES[datatype].itemsize * 8,
        pixdim=(1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0),
        vox_offset=float(VOX_OFFSET),
        scl_slope=1.0,
        scl_inter=0.0,
        qform_code=1,
        sform_code=1,
        quatern=(0.0, 0.0, 0.0),
        qoffset=(ox, oy, oz),
        srow=((sx, 0.0, 0.0, ox), (0.0, sy, 0.0, oy), (0.0, 0.0, sz, oz)),
        magic=b"n+1\x00",
    )


def encode_volume(v: Volume, dtype="float32") -> bytes:
    dt = np.dtype(dtype)
    if dt not in _WRITE_DTYPES:
        raise UnsupportedError(f"cannot write dtype {dt}")
    hdr = _header_for(v, _WRITE_DTYPES[dt])
    body = np.asarray(v.data, dtype=dt.newbyteorder("<")).tobytes(order="F")
    return hdr.pack() + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + body


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write to a sibling temp file and rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def write_volume(v: Volume, path, dtype="float32") -> None:
    """Write ``v`` as single-file NIfTI-1 (float32 unless told otherwise).

    Paths ending in ``.gz`` are gzip-compressed.
    """
    payload = encode_volume(v, dtype)
    if os.fspath(path).endswith(".gz"):
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    atomic_write_bytes(path, payload)
