import struct

import numpy as np
import pytest

from cardioseg.data import load_mask, load_volume
from cardioseg.errors import DataError
from cardioseg.nifti_stub import (
    convert_nifti_mask, convert_nifti_volume, read_nifti,
)


def write_nifti(path, data, spacing=(1.0, 1.0, 1.0), datatype=16,
                magic=b"n+1\x00"):
    """Craft a minimal single-file NIfTI-1 volume (z, y, x data order)."""
    nz, ny, nx = data.shape
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, datatype)
    struct.pack_into("<8f", header, 76, 0.0, spacing[2], spacing[1],
                     spacing[0], 0, 0, 0, 0)
    struct.pack_into("<f", header, 108, 352.0)
    header[344:348] = magic
    np_dtype = {2: np.uint8, 4: np.int16, 16: np.float32}[datatype]
    with open(path, "wb") as f:
        f.write(bytes(header))
        f.write(b"\x00" * 4)  # pad to vox_offset 352
        f.write(np.ascontiguousarray(data, dtype=np_dtype).tobytes())


def test_roundtrip_volume(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.random((3, 4, 5)).astype(np.float32)
    write_nifti(tmp_path / "v.nii", data, spacing=(8.0, 1.5, 1.25))
    vol = convert_nifti_volume(tmp_path / "v.nii", tmp_path / "v.vol",
                               "LGE", "p1")
    np.testing.assert_array_equal(vol.values, data)
    assert vol.spacing == (8.0, 1.5, 1.25)
    back = load_volume(tmp_path / "v.vol")
    np.testing.assert_array_equal(back.values, data)


def test_mask_label_remap(tmp_path):
    labels = np.zeros((2, 4, 4), np.int16)
    labels[0, 0, 0], labels[0, 1, 1], labels[1, 2, 2] = 500, 200, 600
    write_nifti(tmp_path / "m.nii", labels, datatype=4)
    mask = convert_nifti_mask(tmp_path / "m.nii", tmp_path / "m.msk", "LGE",
                              "p1", label_map={500: 1, 200: 2, 600: 3})
    assert mask.labels[0, 0, 0] == 1
    assert mask.labels[0, 1, 1] == 2
    assert mask.labels[1, 2, 2] == 3
    assert load_mask(tmp_path / "m.msk").provenance == "EXPERT"


def test_unmapped_label_rejected(tmp_path):
    labels = np.full((1, 2, 2), 999, np.int16)
    write_nifti(tmp_path / "m.nii", labels, datatype=4)
    with pytest.raises(DataError, match="999"):
        convert_nifti_mask(tmp_path / "m.nii", tmp_path / "m.msk", "LGE",
                           "p1", label_map={500: 1})


def test_compressed_rejected(tmp_path):
    (tmp_path / "v.nii.gz").write_bytes(b"\x1f\x8b junk")
    with pytest.raises(DataError, match="compressed"):
        read_nifti(tmp_path / "v.nii.gz")


def test_two_file_variant_rejected(tmp_path):
    data = np.zeros((1, 2, 2), np.float32)
    write_nifti(tmp_path / "v.nii", data, magic=b"ni1\x00")
    with pytest.raises(DataError, match="two-file"):
        read_nifti(tmp_path / "v.nii")


def test_truncated_data_rejected(tmp_path):
    data = np.zeros((2, 4, 4), np.float32)
    write_nifti(tmp_path / "v.nii", data)
    raw = (tmp_path / "v.nii").read_bytes()
    (tmp_path / "v.nii").write_bytes(raw[:-10])
    with pytest.raises(DataError, match="expected"):
        read_nifti(tmp_path / "v.nii")


def test_not_nifti_rejected(tmp_path):
    (tmp_path / "v.nii").write_bytes(b"\x00" * 400)
    with pytest.raises(DataError, match="NIfTI"):
        read_nifti(tmp_path / "v.nii")
