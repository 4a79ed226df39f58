"""Bit-exact NIfTI-1 single-file reader/writer.

Supports the five datatypes used throughout the pipeline (uint8, int16,
int32, float32, float64), optional gzip containers (sniffed from the
0x1F 0x8B prefix regardless of extension), and both header endiannesses
(inferred from the sizeof_hdr byte pattern). Volumes are never resampled:
all processing happens in voxel index space and the affine is passed
through verbatim.

Out of scope by design: NIfTI-2, the two-file .hdr/.img layout, and
extension payloads beyond the 4 flag bytes (which are passed through).
"""

from __future__ import annotations

import gzip
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    ContractError,
    DataError,
    ParseError,
    TruncatedFileError,
    UnsupportedFormatError,
)
from .volume import BinaryMask, IntensityVolume, LabelVolume, VolumeGeometry

HEADER_SIZE = 348
DEFAULT_VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
GZIP_MAGIC = b"\x1f\x8b"
_NIFTI2_SIZES = (540, 469893120)  # little/big endian views of the NIfTI-2 header size

# struct layout of the published 348-byte header
_HEADER_FMT = "i10s18sihBB8h3fhhhh8ffffhBBffffii80s24shh3f3f4f4f4f16s4s"

# supported datatype codes: uint8, int16, int32, float32, float64
DTYPE_BY_CODE = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
CODE_BY_DTYPE = {dt: code for code, dt in DTYPE_BY_CODE.items()}

# Payloads above this are treated as corrupt headers rather than attempted.
_MAX_PAYLOAD_BYTES = 1 << 34


@dataclass
class NiftiHeader:
    """All fields of the 348-byte NIfTI-1 header, plus bookkeeping for the
    byte order the file uses and the 4 extension flag bytes."""

    sizeof_hdr: int = HEADER_SIZE
    data_type: bytes = b"\x00" * 10
    db_name: bytes = b"\x00" * 18
    extents: int = 0
    session_error: int = 0
    regular: int = 0
    dim_info: int = 0
    dim: tuple[int, ...] = (3, 1, 1, 1, 1, 1, 1, 1)
    intent_p1: float = 0.0
    intent_p2: float = 0.0
    intent_p3: float = 0.0
    intent_code: int = 0
    datatype_code: int = 16
    bitpix: int = 32
    slice_start: int = 0
    pixdim: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    vox_offset: float = float(DEFAULT_VOX_OFFSET)
    scl_slope: float = 0.0
    scl_inter: float = 0.0
    slice_end: int = 0
    slice_code: int = 0
    xyzt_units: int = 2  # NIFTI_UNITS_MM
    cal_max: float = 0.0
    cal_min: float = 0.0
    slice_duration: float = 0.0
    toffset: float = 0.0
    glmax: int = 0
    glmin: int = 0
    descrip: bytes = b"\x00" * 80
    aux_file: bytes = b"\x00" * 24
    qform_code: int = 0
    sform_code: int = 1
    quatern_b: float = 0.0
    quatern_c: float = 0.0
    quatern_d: float = 0.0
    qoffset_x: float = 0.0
    qoffset_y: float = 0.0
    qoffset_z: float = 0.0
    srow_x: tuple[float, ...] = (1.0, 0.0, 0.0, 0.0)
    srow_y: tuple[float, ...] = (0.0, 1.0, 0.0, 0.0)
    srow_z: tuple[float, ...] = (0.0, 0.0, 1.0, 0.0)
    intent_name: bytes = b"\x00" * 16
    magic: bytes = MAGIC_SINGLE
    byteorder: str = "<"
    extension_flags: bytes = b"\x00" * 4

    @property
    def ndim(self) -> int:
        return int(self.dim[0])

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(d) for d in self.dim[1 : 1 + self.ndim])

    @property
    def dtype(self) -> np.dtype:
        return DTYPE_BY_CODE[self.datatype_code]

    def pack(self) -> bytes:
        fields = (
            self.sizeof_hdr,
            _pad(self.data_type, 10),
            _pad(self.db_name, 18),
            self.extents,
            self.session_error,
            self.regular,
            self.dim_info,
            *self.dim,
            self.intent_p1,
            self.intent_p2,
            self.intent_p3,
            self.intent_code,
            self.datatype_code,
            self.bitpix,
            self.slice_start,
            *self.pixdim,
            self.vox_offset,
            self.scl_slope,
            self.scl_inter,
            self.slice_end,
            self.slice_code,
            self.xyzt_units,
            self.cal_max,
            self.cal_min,
            self.slice_duration,
            self.toffset,
            self.glmax,
            self.glmin,
            _pad(self.descrip, 80),
            _pad(self.aux_file, 24),
            self.qform_code,
            self.sform_code,
            self.quatern_b,
            self.quatern_c,
            self.quatern_d,
            self.qoffset_x,
            self.qoffset_y,
            self.qoffset_z,
            *self.srow_x,
            *self.srow_y,
            *self.srow_z,
            _pad(self.intent_name, 16),
            _pad(self.magic, 4),
        )
        return struct.pack(self.byteorder + _HEADER_FMT, *fields)

    @classmethod
    def unpack(cls, raw: bytes, byteorder: str) -> "NiftiHeader":
        vals = list(struct.unpack(byteorder + _HEADER_FMT, raw))
        it = iter(vals)

        def take(n):
            return tuple(next(it) for _ in range(n))

        return cls(
            sizeof_hdr=next(it),
            data_type=next(it),
            db_name=next(it),
            extents=next(it),
            session_error=next(it),
            regular=next(it),
            dim_info=next(it),
            dim=take(8),
            intent_p1=next(it),
            intent_p2=next(it),
            intent_p3=next(it),
            intent_code=next(it),
            datatype_code=next(it),
            bitpix=next(it),
            slice_start=next(it),
            pixdim=take(8),
            vox_offset=next(it),
            scl_slope=next(it),
            scl_inter=next(it),
            slice_end=next(it),
            slice_code=next(it),
            xyzt_units=next(it),
            cal_max=next(it),
            cal_min=next(it),
            slice_duration=next(it),
            toffset=next(it),
            glmax=next(it),
            glmin=next(it),
            descrip=next(it),
            aux_file=next(it),
            qform_code=next(it),
            sform_code=next(it),
            quatern_b=next(it),
            quatern_c=next(it),
            quatern_d=next(it),
            qoffset_x=next(it),
            qoffset_y=next(it),
            qoffset_z=next(it),
            srow_x=take(4),
            srow_y=take(4),
            srow_z=take(4),
            intent_name=next(it),
            magic=next(it),
            byteorder=byteorder,
        )


def _pad(raw: bytes, size: int) -> bytes:
    if len(raw) > size:
        raise ContractError(f"header byte field longer than {size} bytes")
    return raw.ljust(size, b"\x00")


def header_for(
    geometry: VolumeGeometry,
    datatype_code: int,
    n_channels: int | None = None,
    byteorder: str = "<",
) -> NiftiHeader:
    """Build a fresh header for an in-memory volume (sform from the affine,
    qform unset, no intensity rescale)."""
    if datatype_code not in DTYPE_BY_CODE:
        raise ContractError(f"unsupported datatype code {datatype_code}")
    nx, ny, nz = geometry.extents
    if n_channels is None:
        dim = (3, nx, ny, nz, 1, 1, 1, 1)
    else:
        dim = (4, nx, ny, nz, int(n_channels), 1, 1, 1)
    sx, sy, sz = geometry.spacing_mm
    pixdim = (1.0, sx, sy, sz, 1.0, 0.0, 0.0, 0.0)
    aff = geometry.affine
    return NiftiHeader(
        dim=dim,
        datatype_code=datatype_code,
        bitpix=DTYPE_BY_CODE[datatype_code].itemsize * 8,
        pixdim=pixdim,
        sform_code=1,
        qform_code=0,
        srow_x=tuple(float(v) for v in aff[0]),
        srow_y=tuple(float(v) for v in aff[1]),
        srow_z=tuple(float(v) for v in aff[2]),
        byteorder=byteorder,
    )


def _affine_from_header(header: NiftiHeader) -> np.ndarray:
    if header.sform_code > 0:
        aff = np.eye(4, dtype=np.float64)
        aff[0, :] = header.srow_x
        aff[1, :] = header.srow_y
        aff[2, :] = header.srow_z
        return aff
    if header.qform_code > 0:
        b, c, d = header.quatern_b, header.quatern_c, header.quatern_d
        a = float(np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d))))
        rot = np.array(
            [
                [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
                [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
                [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
            ],
            dtype=np.float64,
        )
        qfac = -1.0 if header.pixdim[0] < 0 else 1.0
        sx, sy, sz = (abs(p) for p in header.pixdim[1:4])
        aff = np.eye(4, dtype=np.float64)
        aff[:3, :3] = rot * np.array([sx, sy, qfac * sz])
        aff[:3, 3] = (header.qoffset_x, header.qoffset_y, header.qoffset_z)
        return aff
    aff = np.diag([abs(header.pixdim[1]), abs(header.pixdim[2]), abs(header.pixdim[3]), 1.0])
    return aff


def _geometry_from_header(header: NiftiHeader) -> VolumeGeometry:
    shape = header.shape
    extents = tuple(shape[:3]) + (1,) * (3 - min(3, len(shape)))
    spacing = list(header.pixdim[1:4])
    for axis in range(3):
        if axis < header.ndim and not (np.isfinite(spacing[axis]) and spacing[axis] > 0):
            raise ParseError(f"pixdim[{axis + 1}] must be a positive finite value, got {spacing[axis]}")
        if axis >= header.ndim:
            spacing[axis] = 1.0
    return VolumeGeometry(extents[:3], tuple(spacing), _affine_from_header(header))


def _read_exact(stream, n: int, what: str) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        try:
            chunk = stream.read(min(remaining, 1 << 24))
        except (EOFError, zlib.error, gzip.BadGzipFile) as e:
            raise TruncatedFileError(f"{what}: compressed stream ends early ({e})") from e
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    data = b"".join(chunks)
    if len(data) != n:
        raise TruncatedFileError(f"{what}: expected {n} bytes, got {len(data)}")
    return data


def _open_for_read(path):
    f = open(path, "rb")
    head = f.read(2)
    f.seek(0)
    if head == GZIP_MAGIC:
        return gzip.GzipFile(fileobj=f, mode="rb")
    return f


def read_nifti(path) -> tuple[NiftiHeader, VolumeGeometry, np.ndarray]:
    """Read a single-file NIfTI-1 volume.

    Returns the parsed header, the grid geometry, and the voxel array in
    native byte order with axes ordered (x, y, z[, t/channels...]). The
    scl_slope/scl_inter rescale is applied (yielding float64) whenever
    slope != 0 and (slope, inter) != (1, 0); otherwise the stored values
    are returned untouched. Never reads past vox_offset + payload size.
    """
    path = Path(path)
    with _open_for_read(path) as f:
        raw = _read_exact(f, HEADER_SIZE, "header")
        header = _parse_header(raw)
        if not np.isfinite(header.vox_offset):
            raise ParseError(f"vox_offset: expected an integer >= {HEADER_SIZE}, got {header.vox_offset}")
        vox_offset = int(header.vox_offset)
        if header.vox_offset != vox_offset or vox_offset < HEADER_SIZE or vox_offset > (1 << 30):
            raise ParseError(f"vox_offset: expected an integer >= {HEADER_SIZE}, got {header.vox_offset}")
        gap = vox_offset - HEADER_SIZE
        if gap:
            between = _read_exact(f, gap, "extension bytes")
            header.extension_flags = between[:4].ljust(4, b"\x00")
        itemsize = header.dtype.itemsize
        n_voxels = 1
        for extent in header.shape:  # python ints: immune to overflow from corrupt dims
            n_voxels *= int(extent)
        expected = n_voxels * itemsize
        if expected > _MAX_PAYLOAD_BYTES:
            raise ParseError(f"dim: implausible payload of {expected} bytes")
        payload = _read_exact(f, expected, "voxel payload")
        if isinstance(f, gzip.GzipFile):
            # force trailer validation so a truncated member cannot pass silently
            try:
                f.read(1)
            except (EOFError, zlib.error) as e:
                raise TruncatedFileError(f"voxel payload: compressed stream ends early ({e})") from e
            except gzip.BadGzipFile:
                pass  # trailing junk after a complete member

    native_dtype = header.dtype
    file_dtype = native_dtype.newbyteorder(header.byteorder)
    arr = np.frombuffer(payload, dtype=file_dtype).reshape(header.shape, order="F")
    if file_dtype != native_dtype:
        arr = arr.byteswap().view(native_dtype)
    data = arr.copy(order="C")

    slope, inter = header.scl_slope, header.scl_inter
    if slope != 0.0 and (slope, inter) != (1.0, 0.0):
        data = data.astype(np.float64) * slope + inter

    return header, _geometry_from_header(header), data


def _parse_header(raw: bytes) -> NiftiHeader:
    (size_le,) = struct.unpack("<i", raw[:4])
    (size_be,) = struct.unpack(">i", raw[:4])
    if size_le == HEADER_SIZE:
        byteorder = "<"
    elif size_be == HEADER_SIZE:
        byteorder = ">"
    elif size_le in _NIFTI2_SIZES or size_be in _NIFTI2_SIZES:
        raise UnsupportedFormatError("sizeof_hdr indicates NIfTI-2, which is not supported")
    else:
        raise ParseError(f"sizeof_hdr: expected {HEADER_SIZE}, got {size_le} (LE) / {size_be} (BE)")
    header = NiftiHeader.unpack(raw, byteorder)
    if header.magic == MAGIC_PAIR:
        raise UnsupportedFormatError("two-file NIfTI ('ni1' magic, .hdr/.img pair) is not supported")
    if header.magic != MAGIC_SINGLE:
        raise ParseError(f"magic: expected b'n+1\\x00', got {header.magic!r}")
    if not 1 <= header.ndim <= 7:
        raise ParseError(f"dim[0]: expected 1..7, got {header.ndim}")
    for i, extent in enumerate(header.shape, start=1):
        if extent < 1:
            raise ParseError(f"dim[{i}]: expected >= 1, got {extent}")
    if header.datatype_code not in DTYPE_BY_CODE:
        raise UnsupportedFormatError(
            f"datatype: code {header.datatype_code} not supported "
            f"(supported codes: {sorted(DTYPE_BY_CODE)})"
        )
    if header.bitpix != header.dtype.itemsize * 8:
        raise ParseError(
            f"bitpix: expected {header.dtype.itemsize * 8} for datatype code "
            f"{header.datatype_code}, got {header.bitpix}"
        )
    return header


def write_nifti(path, header: NiftiHeader, geometry: VolumeGeometry, data: np.ndarray) -> None:
    """Write a single-file NIfTI-1 volume ('n+1' magic, vox_offset 352),
    gzip-compressed when the path ends in .gz.

    The buffer must match the header's datatype and the header/geometry
    extents exactly; the voxel bytes are emitted verbatim in the header's
    byte order, so read -> write -> read is the identity on voxel values.
    """
    path = Path(path)
    if header.datatype_code not in DTYPE_BY_CODE:
        raise ContractError(f"unsupported datatype code {header.datatype_code}")
    target = header.dtype
    if data.dtype != target:
        raise ContractError(f"buffer dtype {data.dtype} does not match header datatype {target}")
    if tuple(data.shape) != header.shape:
        raise ContractError(f"buffer shape {tuple(data.shape)} does not match header dim {header.shape}")
    if tuple(data.shape[:3]) != geometry.extents[: min(3, data.ndim)]:
        raise ContractError(
            f"buffer shape {tuple(data.shape)} does not match geometry extents {geometry.extents}"
        )
    if not np.allclose(header.pixdim[1 : 1 + min(3, header.ndim)],
                       geometry.spacing_mm[: min(3, header.ndim)], rtol=0, atol=1e-5):
        raise ContractError("header pixdim does not match geometry spacing")

    out = replace(header)
    out.vox_offset = float(DEFAULT_VOX_OFFSET)
    out.sizeof_hdr = HEADER_SIZE

    if target.newbyteorder(header.byteorder) != data.dtype:
        payload = data.byteswap().tobytes(order="F")
    else:
        payload = data.tobytes(order="F")

    path.parent.mkdir(parents=True, exist_ok=True)
    blob = out.pack() + _pad(out.extension_flags, 4) + payload
    if path.suffix == ".gz":
        with open(path, "wb") as raw:
            # fixed mtime/level and no embedded name, so outputs are byte-reproducible
            with gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0, compresslevel=6) as zf:
                zf.write(blob)
    else:
        with open(path, "wb") as f:
            f.write(blob)


def read_intensity(path) -> IntensityVolume:
    """Load a 3D scan as an IntensityVolume (any supported dtype)."""
    header, geometry, data = read_nifti(path)
    if data.ndim != 3:
        raise DataError(f"{path}: expected a 3D volume, got {data.ndim}D")
    return IntensityVolume(geometry, data)


def read_labels(path) -> LabelVolume:
    """Load a 3D segmentation as a LabelVolume (integer dtype required)."""
    header, geometry, data = read_nifti(path)
    if data.ndim != 3:
        raise DataError(f"{path}: expected a 3D label volume, got {data.ndim}D")
    if not np.issubdtype(data.dtype, np.integer):
        raise DataError(f"{path}: label volumes must use an integer datatype, got {data.dtype}")
    return LabelVolume(geometry, data)


def write_labels(path, labels: LabelVolume) -> None:
    """Serialise a label volume as uint8."""
    data = labels.data
    if data.min() < 0 or data.max() > 255:
        raise ContractError("labels outside 0..255 cannot be written as uint8")
    header = header_for(labels.geometry, datatype_code=2)
    write_nifti(path, header, labels.geometry, data.astype(np.uint8))


def write_intensity(path, volume: IntensityVolume, datatype_code: int = 16) -> None:
    """Serialise an intensity volume, casting to the requested datatype."""
    header = header_for(volume.geometry, datatype_code=datatype_code)
    write_nifti(path, header, volume.geometry, volume.data.astype(header.dtype))


def write_mask(path, mask: BinaryMask) -> None:
    """Serialise a binary mask as a 0/1 uint8 volume."""
    header = header_for(mask.geometry, datatype_code=2)
    write_nifti(path, header, mask.geometry, mask.data.astype(np.uint8))
