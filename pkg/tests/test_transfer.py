import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardioseg.data import Case, MaskVolume, Volume, synth_phantom
from cardioseg.errors import DataError
from cardioseg.losses import PSEUDO
from cardioseg.transfer import (
    SliceMapping, assemble_transfer_set, build_pseudo_cases, map_slice_index,
)


def make_case(pid, modality, n_slices, labeled, size=16, label_value=1):
    rng = np.random.default_rng(hash((pid, modality)) % 2**32)
    vol = Volume(rng.random((n_slices, size, size), np.float32).astype(np.float32),
                 modality=modality, patient_id=pid)
    mask = None
    if labeled:
        labels = np.zeros((n_slices, size, size), np.uint8)
        labels[:, 4:10, 4:10] = label_value
        mask = MaskVolume(labels, modality=modality, patient_id=pid)
    return Case(vol, mask)


class TestMapSliceIndex:
    def test_identity_when_counts_match(self):
        for m in (1, 3, 8):
            for i in range(m):
                assert map_slice_index(i, m, m) == i

    def test_direct_arithmetic(self):
        assert map_slice_index(7, 10, 5) == 3  # floor(7 * 5 / 10)

    def test_m12_n5_table(self):
        got = tuple(map_slice_index(i, 12, 5) for i in range(12))
        # brute-force evaluation of floor(i * 5 / 12) for every i
        want = tuple(int(np.floor(i * 5 / 12)) for i in range(12))
        assert got == want == (0, 0, 0, 1, 1, 2, 2, 2, 3, 3, 4, 4)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            map_slice_index(10, 10, 5)
        with pytest.raises(ValueError):
            map_slice_index(-1, 10, 5)
        with pytest.raises(ValueError):
            map_slice_index(0, 0, 5)

    @given(m=st.integers(1, 64), n=st.integers(1, 64))
    @settings(max_examples=200, deadline=None)
    def test_range_and_monotonicity(self, m, n):
        js = [map_slice_index(i, m, n) for i in range(m)]
        assert all(0 <= j < n for j in js)
        assert js == sorted(js)

    @given(m=st.integers(1, 64))
    @settings(max_examples=100, deadline=None)
    def test_surjective_when_target_not_larger(self, m):
        for n in range(1, m + 1):
            hit = {map_slice_index(i, m, n) for i in range(m)}
            assert hit == set(range(n))

    def test_mapping_table(self):
        sm = SliceMapping.build("bSSFP", "LGE", 12, 5)
        assert sm.table == (0, 0, 0, 1, 1, 2, 2, 2, 3, 3, 4, 4)


class TestBuildPseudoCases:
    def test_equal_counts_copy_slice_for_slice(self):
        src = make_case("p0", "bSSFP", 5, labeled=True)
        tgt = make_case("p0", "LGE", 5, labeled=False)
        cases = build_pseudo_cases(src, tgt)
        assert len(cases) == 5
        for k, pc in enumerate(cases):
            assert pc.source_index == pc.target_index == k
            np.testing.assert_array_equal(pc.pseudo_mask, src.mask.labels[k])
            np.testing.assert_array_equal(pc.target_image, tgt.volume.values[k])
            assert pc.provenance == PSEUDO

    def test_collisions_collapse_to_largest_source_index(self):
        src = make_case("p0", "bSSFP", 10, labeled=True)
        tgt = make_case("p0", "LGE", 5, labeled=False)
        cases = build_pseudo_cases(src, tgt)
        # distinct values of floor(i * 5 / 10) for i in 0..9
        assert len(cases) == len({(i * 5) // 10 for i in range(10)}) == 5
        for pc in cases:
            # last writer: the larger of the two sources mapping to each j
            assert pc.source_index == 2 * pc.target_index + 1

    def test_pseudo_labels_subset_of_source_labels(self):
        src = make_case("p0", "T2", 7, labeled=True, label_value=3)
        tgt = make_case("p0", "LGE", 4, labeled=False)
        for pc in build_pseudo_cases(src, tgt):
            assert set(np.unique(pc.pseudo_mask)) <= set(np.unique(src.mask.labels))

    def test_resamples_to_target_grid(self):
        src = make_case("p0", "bSSFP", 3, labeled=True, size=32)
        tgt = make_case("p0", "LGE", 3, labeled=False, size=16)
        for pc in build_pseudo_cases(src, tgt):
            assert pc.pseudo_mask.shape == (16, 16)
            assert pc.pseudo_mask.any()

    def test_patient_mismatch_rejected(self):
        src = make_case("p0", "bSSFP", 4, labeled=True)
        tgt = make_case("p1", "LGE", 4, labeled=False)
        with pytest.raises(DataError, match="patient"):
            build_pseudo_cases(src, tgt)

    def test_unlabeled_source_rejected(self):
        src = make_case("p0", "bSSFP", 4, labeled=False)
        tgt = make_case("p0", "LGE", 4, labeled=False)
        with pytest.raises(DataError, match="no mask"):
            build_pseudo_cases(src, tgt)


class TestAssembleTransferSet:
    def test_both_sources_contribute(self):
        cases = [make_case("p0", "bSSFP", 5, True),
                 make_case("p0", "T2", 5, True),
                 make_case("p0", "LGE", 5, False)]
        pseudo = assemble_transfer_set(cases)
        assert len(pseudo) == 10
        assert {pc.source_modality for pc in pseudo} == {"bSSFP", "T2"}

    def test_expert_lge_patient_excluded(self):
        cases = [make_case("p0", "bSSFP", 5, True),
                 make_case("p0", "LGE", 5, True)]
        assert assemble_transfer_set(cases) == []

    def test_no_lge_gives_empty_set(self):
        cases = [make_case("p0", "bSSFP", 5, True),
                 make_case("p0", "T2", 4, True)]
        assert assemble_transfer_set(cases) == []

    def test_phantom_dataset_counts(self):
        cases, _ = synth_phantom(seed=1, patients=2,
                                 slices_per_modality=(6, 5, 4), size=32,
                                 lge_labeled=1)
        pseudo = assemble_transfer_set(cases)
        # patient 0 has expert LGE -> excluded; patient 1 contributes
        # distinct-j counts from m=6 and m=5 onto n=4
        n_from_bssfp = len({(i * 4) // 6 for i in range(6)})
        n_from_t2 = len({(i * 4) // 5 for i in range(5)})
        assert len(pseudo) == n_from_bssfp + n_from_t2
        assert {pc.patient_id for pc in pseudo} == {"p001"}
