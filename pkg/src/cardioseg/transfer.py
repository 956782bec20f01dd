"""Weak cross-modality mask transfer.

Annotated slices from a source modality (bSSFP or T2) are copied onto the
unlabeled target modality (LGE) of the same patient by normalized slice
index: source slice i of m maps to target slice floor(i * n / m) of n. The
copied masks become weak "pseudo" supervision. No registration is
performed; masks are only resampled in-plane (nearest neighbor) when the
grids differ.

Indexing is 0-based: with 1-based indices the mapping would overflow the
target range at the last slice. When several source slices collide on one
target index the largest source index wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Case
from .errors import DataError
from .losses import PSEUDO


@dataclass(frozen=True)
class SliceMapping:
    source_modality: str
    target_modality: str
    m: int  # source slice count
    n: int  # target slice count
    table: tuple[int, ...] = field(default=())

    @staticmethod
    def build(source_modality: str, target_modality: str, m: int,
              n: int) -> "SliceMapping":
        table = tuple(map_slice_index(i, m, n) for i in range(m))
        return SliceMapping(source_modality, target_modality, m, n, table)


@dataclass
class PseudoCase:
    """One pseudo-labeled target slice assembled from a source annotation."""

    patient_id: str
    target_image: np.ndarray  # 2-d float32
    pseudo_mask: np.ndarray  # 2-d uint8
    source_modality: str
    source_index: int
    target_index: int
    provenance: str = PSEUDO


def map_slice_index(i: int, m: int, n: int) -> int:
    """Target slice index floor(i * n / m), in exact integer arithmetic."""
    if m < 1 or n < 1:
        raise ValueError(f"slice counts must be >= 1, got m={m}, n={n}")
    if not 0 <= i < m:
        raise ValueError(f"source index {i} outside [0, {m})")
    return (i * n) // m


def _resample_nearest(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if mask.shape == shape:
        return mask
    h, w = mask.shape
    rows = np.minimum((np.arange(shape[0]) * h) // shape[0], h - 1)
    cols = np.minimum((np.arange(shape[1]) * w) // shape[1], w - 1)
    return mask[np.ix_(rows, cols)]


def build_pseudo_cases(source: Case, target: Case) -> list[PseudoCase]:
    """Pseudo-label the target volume from one annotated source volume.

    One PseudoCase per distinct target index; colliding source slices
    collapse to the largest source index.
    """
    if source.mask is None:
        raise DataError(f"source case {source.volume.patient_id}/"
                        f"{source.volume.modality} has no mask")
    if target.mask is not None:
        raise DataError(f"target case {target.volume.patient_id}/"
                        f"{target.volume.modality} already has a mask")
    if source.volume.patient_id != target.volume.patient_id:
        raise DataError(f"patient mismatch: {source.volume.patient_id} vs "
                        f"{target.volume.patient_id}")

    m = source.volume.values.shape[0]
    n = target.volume.values.shape[0]
    chosen: dict[int, int] = {}
    for i in range(m):
        chosen[map_slice_index(i, m, n)] = i  # ascending i: last writer wins

    out = []
    target_shape = target.volume.values.shape[1:]
    for j in sorted(chosen):
        i = chosen[j]
        mask = _resample_nearest(source.mask.labels[i], target_shape)
        out.append(PseudoCase(
            patient_id=target.volume.patient_id,
            target_image=target.volume.values[j],
            pseudo_mask=mask.astype(np.uint8),
            source_modality=source.volume.modality,
            source_index=i,
            target_index=j,
        ))
    return out


def assemble_transfer_set(cases: list[Case]) -> list[PseudoCase]:
    """Collect pseudo cases for every patient whose LGE volume lacks an
    expert mask, from each of their annotated companion modalities."""
    by_patient: dict[str, list[Case]] = {}
    for c in cases:
        by_patient.setdefault(c.volume.patient_id, []).append(c)

    pseudo: list[PseudoCase] = []
    for pid in sorted(by_patient):
        group = by_patient[pid]
        targets = [c for c in group if c.volume.modality == "LGE"]
        if not targets or any(t.mask is not None for t in targets):
            continue  # no LGE, or the patient already has expert LGE masks
        sources = [c for c in group
                   if c.volume.modality != "LGE" and c.mask is not None]
        for target in targets:
            for source in sorted(sources, key=lambda c: c.volume.modality):
                pseudo.extend(build_pseudo_cases(source, target))
    return pseudo
