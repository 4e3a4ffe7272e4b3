import struct

import numpy as np
import pytest

from trisr.exceptions import FormatError, TruncatedFile, UnsupportedDtype
from trisr.nifti import NiftiHeader, decode_nifti, encode_nifti, header_dtype, read_nifti
from trisr.volume_io import Volume, read_volume, write_volume


def nifti_header(dims=(3, 2, 2), datatype=4, bitpix=16, slope=2.0, inter=1.0, magic=b"n+1\x00",
                 pixdim=(1.0, 0.5, 0.75, 2.0), vox_offset=352.0) -> bytes:
    """NIfTI-1 header assembled field by field at the documented byte offsets."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    w, h, d = dims
    struct.pack_into("<8h", hdr, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, *pixdim, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, vox_offset)
    struct.pack_into("<f", hdr, 112, slope)
    struct.pack_into("<f", hdr, 116, inter)
    hdr[344:348] = magic
    return bytes(hdr)


def int16_fixture(raw_values, **kwargs) -> bytes:
    return nifti_header(**kwargs) + b"\x00" * 4 + np.asarray(raw_values, dtype="<i2").tobytes()


def test_header_layout_size():
    assert header_dtype.itemsize == 348


def test_scaled_values():
    raw = np.arange(12)
    raw[5] = 3
    v = decode_nifti(int16_fixture(raw))
    assert v.dims == (3, 2, 2)
    assert v.spacing == (0.5, 0.75, 2.0)
    # raw voxel 3 -> 2 * 3 + 1
    assert v.flat()[5] == 7.0
    np.testing.assert_allclose(v.flat(), raw * 2.0 + 1.0)


def test_zero_slope_means_unscaled():
    v = decode_nifti(int16_fixture(np.arange(12), slope=0.0, inter=5.0))
    np.testing.assert_array_equal(v.flat(), np.arange(12))


def test_float64_payload():
    values = np.linspace(-1, 1, 12)
    raw = nifti_header(datatype=64, bitpix=64, slope=1.0, inter=0.0) + b"\x00" * 4 + values.astype("<f8").tobytes()
    v = decode_nifti(raw)
    assert v.data.dtype == np.float64
    np.testing.assert_array_equal(v.flat(), values)


def test_header_and_image_pair(tmp_path):
    (tmp_path / "scan.hdr").write_bytes(nifti_header(magic=b"ni1\x00", vox_offset=0.0))
    (tmp_path / "scan.img").write_bytes(np.arange(12, dtype="<i2").tobytes())
    v = read_nifti(tmp_path / "scan.hdr")
    np.testing.assert_allclose(v.flat(), np.arange(12) * 2.0 + 1.0)


def test_bad_magic():
    with pytest.raises(FormatError):
        decode_nifti(int16_fixture(np.arange(12), magic=b"XXXX"))


def test_unsupported_datatype():
    with pytest.raises(UnsupportedDtype):
        decode_nifti(int16_fixture(np.arange(12), datatype=2, bitpix=8))


def test_truncated_payload():
    with pytest.raises(TruncatedFile):
        decode_nifti(int16_fixture(np.arange(12))[:-2])


def test_truncated_header():
    with pytest.raises(TruncatedFile):
        NiftiHeader.from_bytes(b"\x00" * 100)


def test_write_then_read(rng, tmp_path):
    v = Volume(rng.random((3, 4, 5)).astype(np.float32), (0.5, 1.0, 1.5))
    path = write_volume(v, tmp_path / "out.nii")
    back = read_volume(path)
    assert back.dims == v.dims
    assert back.spacing == v.spacing
    np.testing.assert_array_equal(back.data, v.data)
    assert encode_nifti(back) == path.read_bytes()
