"""Minimal converter from uncompressed single-file NIfTI-1 volumes to the
native raw + sidecar format.

This is a stub by design: it parses the fixed 348-byte NIfTI-1 header
(dimensions, datatype, voxel spacing, data offset) for uncompressed
``.nii`` files only, enough to ingest typical challenge exports. No
orientation handling, no extensions, no compressed or two-file variants.
Label volumes are remapped into the internal {0: background, 1: LV, 2: myo,
3: RV} encoding via an explicit value table.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import MaskVolume, Volume, save_mask, save_volume
from .errors import DataError

_DATATYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32,
              64: np.float64, 256: np.int8, 512: np.uint16}


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Return (slices, H, W) data and per-axis spacing in mm."""
    path = Path(path)
    if path.suffix == ".gz":
        raise DataError(f"{path}: compressed NIfTI is not supported by the stub")
    raw = path.read_bytes()
    if len(raw) < 352:
        raise DataError(f"{path}: file too small to hold a NIfTI-1 header")

    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    swap = "<"
    if sizeof_hdr != 348:
        if struct.unpack_from(">i", raw, 0)[0] == 348:
            swap = ">"
        else:
            raise DataError(f"{path}: not a NIfTI-1 file (header size "
                            f"{sizeof_hdr})")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise DataError(f"{path}: bad NIfTI magic {magic!r}")
    if magic == b"ni1\x00":
        raise DataError(f"{path}: two-file NIfTI (.hdr/.img) is not supported")

    dim = struct.unpack_from(f"{swap}8h", raw, 40)
    if dim[0] != 3:
        raise DataError(f"{path}: expected a 3-d volume, header says "
                        f"{dim[0]}-d")
    nx, ny, nz = dim[1], dim[2], dim[3]
    datatype = struct.unpack_from(f"{swap}h", raw, 70)[0]
    if datatype not in _DATATYPES:
        raise DataError(f"{path}: unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack_from(f"{swap}8f", raw, 76)
    vox_offset = int(struct.unpack_from(f"{swap}f", raw, 108)[0])

    dtype = np.dtype(_DATATYPES[datatype]).newbyteorder(swap)
    count = nx * ny * nz
    expected = vox_offset + count * dtype.itemsize
    if len(raw) < expected:
        raise DataError(f"{path}: expected {expected} bytes for "
                        f"{nx}x{ny}x{nz} {dtype}, found {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    # NIfTI stores x fastest: C-order view is (z, y, x) = slice-major
    volume = data.reshape(nz, ny, nx)
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    return np.ascontiguousarray(volume), spacing


def convert_nifti_volume(nii_path, out_path, modality: str,
                         patient_id: str) -> Volume:
    data, spacing = read_nifti(nii_path)
    vol = Volume(data.astype(np.float32), spacing, modality, patient_id)
    save_volume(vol, out_path)
    return vol


def convert_nifti_mask(nii_path, out_path, modality: str, patient_id: str,
                       label_map: dict[int, int],
                       provenance: str = "EXPERT") -> MaskVolume:
    """Convert an annotation volume, remapping the file's label values (for
    example 500/200/600 in the challenge encoding) via ``label_map``."""
    data, spacing = read_nifti(nii_path)
    values = set(np.unique(data).tolist()) - {0}
    unmapped = values - set(label_map)
    if unmapped:
        raise DataError(f"{nii_path}: label values {sorted(unmapped)} missing "
                        f"from the remap table")
    labels = np.zeros(data.shape, np.uint8)
    for src, dst in label_map.items():
        labels[data == src] = dst
    mask = MaskVolume(labels, spacing, provenance, modality, patient_id)
    save_mask(mask, out_path)
    return mask
