"""Minimal NIfTI-1 reader/writer: 3-D (or singleton 4-D) volumes, little-endian,
int16/float32/float64 payloads, no extensions, no compression."""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from trisr.config import (NIFTI_HEADER_SIZE, NIFTI_MAGIC_PAIR, NIFTI_MAGIC_SINGLE,
                          NIFTI_VOX_OFFSET)
from trisr.exceptions import FormatError, TruncatedFile, UnsupportedDtype
from trisr.file_utils import read_bytes
from trisr.volume_io import Volume

header_dtd = [
    ('sizeof_hdr', '<i4'),      # 0; must be 348
    ('data_type', 'S10'),       # 4; unused
    ('db_name', 'S18'),         # 14; unused
    ('extents', '<i4'),         # 32; unused
    ('session_error', '<i2'),   # 36; unused
    ('regular', 'S1'),          # 38; unused
    ('dim_info', 'u1'),         # 39
    ('dim', '<i2', (8,)),       # 40; data array dimensions
    ('intent_p1', '<f4'),       # 56
    ('intent_p2', '<f4'),       # 60
    ('intent_p3', '<f4'),       # 64
    ('intent_code', '<i2'),     # 68
    ('datatype', '<i2'),        # 70
    ('bitpix', '<i2'),          # 72
    ('slice_start', '<i2'),     # 74
    ('pixdim', '<f4', (8,)),    # 76; grid spacings
    ('vox_offset', '<f4'),      # 108; offset to data in image file
    ('scl_slope', '<f4'),       # 112
    ('scl_inter', '<f4'),       # 116
    ('slice_end', '<i2'),       # 120
    ('slice_code', 'u1'),       # 122
    ('xyzt_units', 'u1'),       # 123
    ('cal_max', '<f4'),         # 124
    ('cal_min', '<f4'),         # 128
    ('slice_duration', '<f4'),  # 132
    ('toffset', '<f4'),         # 136
    ('glmax', '<i4'),           # 140
    ('glmin', '<i4'),           # 144
    ('descrip', 'S80'),         # 148
    ('aux_file', 'S24'),        # 228
    ('qform_code', '<i2'),      # 252
    ('sform_code', '<i2'),      # 254
    ('quatern_b', '<f4'),       # 256
    ('quatern_c', '<f4'),       # 260
    ('quatern_d', '<f4'),       # 264
    ('qoffset_x', '<f4'),       # 268
    ('qoffset_y', '<f4'),       # 272
    ('qoffset_z', '<f4'),       # 276
    ('srow_x', '<f4', (4,)),    # 280
    ('srow_y', '<f4', (4,)),    # 296
    ('srow_z', '<f4', (4,)),    # 312
    ('intent_name', 'S16'),     # 328
    ('magic', 'S4'),            # 344; 'ni1\0' or 'n+1\0'
]

header_dtype = np.dtype(header_dtd)
assert header_dtype.itemsize == NIFTI_HEADER_SIZE

# datatype code -> (numpy dtype, bitpix)
DATATYPES = {
    4: (np.dtype('<i2'), 16),
    16: (np.dtype('<f4'), 32),
    64: (np.dtype('<f8'), 64),
}

XYZT_UNITS_MM = 2


@dataclass(frozen=True)
class NiftiHeader:
    dim: Tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: Tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes

    @property
    def shape(self) -> Tuple[int, int, int]:
        """(W, H, D)."""
        return (int(self.dim[1]), int(self.dim[2]), int(self.dim[3]))

    @property
    def spacing(self) -> Tuple[float, float, float]:
        return tuple(float(abs(s)) or 1.0 for s in self.pixdim[1:4])

    @property
    def is_single_file(self) -> bool:
        return self.magic == NIFTI_MAGIC_SINGLE

    @classmethod
    def from_bytes(cls, raw: bytes, source: Union[str, Path] = "<bytes>") -> "NiftiHeader":
        if len(raw) < NIFTI_HEADER_SIZE:
            raise TruncatedFile(f"{source}: {len(raw)} bytes is shorter than a NIfTI-1 header")

        hdr = np.frombuffer(raw, dtype=header_dtype, count=1)[0]
        magic = bytes(hdr['magic'])  # numpy drops the trailing NUL
        if magic not in (NIFTI_MAGIC_SINGLE, NIFTI_MAGIC_PAIR):
            raise FormatError(f"{source}: bad NIfTI magic {raw[344:348]!r}")
        if int(hdr['sizeof_hdr']) != NIFTI_HEADER_SIZE:
            raise FormatError(f"{source}: sizeof_hdr is {int(hdr['sizeof_hdr'])}, expected 348")

        dim = tuple(int(x) for x in hdr['dim'])
        if dim[0] not in (3, 4):
            raise FormatError(f"{source}: dim[0]={dim[0]}, only 3-D volumes are supported")
        if dim[0] == 4 and dim[4] not in (0, 1):
            raise FormatError(f"{source}: 4-D series with {dim[4]} frames are not supported")
        if min(dim[1:4]) < 1:
            raise FormatError(f"{source}: invalid dims {dim[1:4]}")

        datatype = int(hdr['datatype'])
        if datatype not in DATATYPES:
            raise UnsupportedDtype(f"{source}: unsupported NIfTI datatype code {datatype}")

        return cls(
            dim=dim,
            datatype=datatype,
            bitpix=int(hdr['bitpix']),
            pixdim=tuple(float(x) for x in hdr['pixdim']),
            vox_offset=float(hdr['vox_offset']),
            scl_slope=float(hdr['scl_slope']),
            scl_inter=float(hdr['scl_inter']),
            magic=magic,
        )

    def to_bytes(self) -> bytes:
        hdr = np.zeros((), dtype=header_dtype)
        hdr['sizeof_hdr'] = NIFTI_HEADER_SIZE
        hdr['dim'] = self.dim
        hdr['datatype'] = self.datatype
        hdr['bitpix'] = self.bitpix
        hdr['pixdim'] = self.pixdim
        hdr['vox_offset'] = self.vox_offset
        hdr['scl_slope'] = self.scl_slope
        hdr['scl_inter'] = self.scl_inter
        hdr['xyzt_units'] = XYZT_UNITS_MM
        hdr['magic'] = self.magic
        return hdr.tobytes()


def decode_nifti(raw: bytes, source: Union[str, Path] = "<bytes>", payload: Optional[bytes] = None) -> Volume:
    """Decode a single-file image, or a header plus its separate payload ("ni1")."""
    header = NiftiHeader.from_bytes(raw, source)
    dtype, _ = DATATYPES[header.datatype]
    w, h, d = header.shape
    count = w * h * d

    if header.is_single_file:
        buf, offset = raw, int(header.vox_offset)
    else:
        buf, offset = payload or b"", int(header.vox_offset)
    needed = offset + count * dtype.itemsize
    if len(buf) < needed:
        raise TruncatedFile(f"{source}: image data needs {needed} bytes, found {len(buf)}")

    values = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    out_dtype = np.float64 if header.datatype == 64 else np.float32
    data = values.astype(np.float64)
    if header.scl_slope != 0 and np.isfinite(header.scl_slope):
        data = data * header.scl_slope + header.scl_inter
    return Volume(data.astype(out_dtype).reshape(d, h, w), header.spacing)


def read_nifti(path: Union[str, Path]) -> Volume:
    path = Path(path)
    raw = read_bytes(path)
    header = NiftiHeader.from_bytes(raw, path)
    if header.is_single_file:
        return decode_nifti(raw, path)
    return decode_nifti(raw, path, payload=read_bytes(path.with_suffix(".img")))


def encode_nifti(v: Volume) -> bytes:
    w, h, d = v.dims
    sx, sy, sz = v.spacing
    header = NiftiHeader(
        dim=(3, w, h, d, 1, 1, 1, 1),
        datatype=16,
        bitpix=32,
        pixdim=(1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0),
        vox_offset=float(NIFTI_VOX_OFFSET),
        scl_slope=1.0,
        scl_inter=0.0,
        magic=NIFTI_MAGIC_SINGLE,
    )
    pad = b"\x00" * (NIFTI_VOX_OFFSET - NIFTI_HEADER_SIZE)
    return header.to_bytes() + pad + np.ascontiguousarray(v.data, dtype='<f4').tobytes()
