"""Synthetic-lesion generation, placement, insertion and dataset runs."""

import json

import numpy as np
import pytest

from tumorkit.augment import (
    CaseRecord,
    InsertionSpec,
    LesionPatch,
    augment_case,
    augment_dataset,
    generate_random_label,
    head_mask_for,
    insert_lesion,
    load_case,
    manifest_summary,
    procedural_lesion,
    sample_center,
    scan_dataset,
)
from tumorkit.errors import ContractError, PlacementError
from tumorkit.schemes import GLIOMA_POST_TREATMENT, MENINGIOMA_RT
from tumorkit.volume import BinaryMask, IntensityVolume, LabelVolume, dilate

from helpers import geom, head_case_arrays, make_dataset

GLIOMA = GLIOMA_POST_TREATMENT


def _case(rng, shape=(32, 32, 32), scheme=GLIOMA, lesion=True):
    modalities, labels = head_case_arrays(rng, shape, scheme.name, lesion=lesion)
    g = geom(shape)
    return CaseRecord(
        case_id="00007",
        modalities={k: IntensityVolume(g, v) for k, v in modalities.items()},
        labels=LabelVolume(g, labels),
        scheme=scheme,
    )


class TestGenerateRandomLabel:
    def test_meningioma_single_class(self):
        rng = np.random.default_rng(0)
        patch = generate_random_label(MENINGIOMA_RT, (3, 6), rng)
        values = set(np.unique(patch).tolist())
        assert values == {0, 1}

    @pytest.mark.parametrize("seed", range(8))
    def test_glioma_nested_bands(self, seed):
        rng = np.random.default_rng(seed)
        patch = generate_random_label(GLIOMA, (3, 7), rng)
        values = set(np.unique(patch).tolist()) - {0}
        assert {2, 3} <= values  # outer SNFH and ET shell always present
        support = patch != 0
        assert (patch[support] > 0).all()
        assert set(np.unique(patch).tolist()) <= {0, 1, 2, 3}
        # ET lies within the lesion support by construction
        assert support[patch == 3].all()

    def test_fixed_seed_bit_identical(self):
        a = generate_random_label(GLIOMA, (3, 6), np.random.default_rng(42))
        b = generate_random_label(GLIOMA, (3, 6), np.random.default_rng(42))
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("size_range", [(0, 5), (5, 3), (1, 1)])
    def test_degenerate_size_range_rejected(self, size_range):
        with pytest.raises(ContractError):
            generate_random_label(GLIOMA, size_range, np.random.default_rng(0))

    def test_oversized_range_rejected(self):
        with pytest.raises(ContractError, match="patch limit"):
            generate_random_label(GLIOMA, (3, 200), np.random.default_rng(0))


class TestProceduralLesion:
    def test_zero_label_patch_rejected(self):
        with pytest.raises(ContractError):
            procedural_lesion(np.zeros((5, 5, 5), np.uint8), 4, np.random.default_rng(0))

    def test_fixed_seed_identical(self):
        labels = generate_random_label(GLIOMA, (3, 6), np.random.default_rng(1))
        a = procedural_lesion(labels, 4, np.random.default_rng(2))
        b = procedural_lesion(labels, 4, np.random.default_rng(2))
        assert np.array_equal(a.intensities, b.intensities)
        assert np.array_equal(a.blend, b.blend)

    def test_blend_field_contract(self):
        labels = generate_random_label(GLIOMA, (3, 6), np.random.default_rng(3))
        patch = procedural_lesion(labels, 2, np.random.default_rng(4))
        assert patch.blend.min() >= 0.0
        assert patch.blend.max() <= 1.0
        shell = np.ones(patch.blend.shape, bool)
        shell[1:-1, 1:-1, 1:-1] = False
        assert not patch.blend[shell].any()
        assert patch.blend.max() > 0.5  # meaningful blending inside

    def test_patch_invariants_enforced(self):
        bad_blend = np.ones((3, 3, 3))
        labels = np.zeros((3, 3, 3), np.uint8)
        labels[1, 1, 1] = 1
        with pytest.raises(ContractError, match="border shell"):
            LesionPatch(np.zeros((1, 3, 3, 3)), labels, bad_blend)


class TestHeadMask:
    def test_nonzero_source(self):
        case = _case(np.random.default_rng(0))
        head = head_mask_for(case, "nonzero")
        first = next(iter(case.modalities.values()))
        assert np.array_equal(head.data, first.data != 0)

    def test_otsu_source_covers_head(self):
        case = _case(np.random.default_rng(1))
        head = head_mask_for(case, "otsu")
        nz = next(iter(case.modalities.values())).data != 0
        overlap = (head.data & nz).sum() / nz.sum()
        assert overlap > 0.95

    def test_unknown_source(self):
        case = _case(np.random.default_rng(0))
        with pytest.raises(ContractError):
            head_mask_for(case, "bogus")


class TestSampleCenter:
    def test_small_patch_places_quickly(self):
        rng = np.random.default_rng(5)
        case = _case(rng)
        spec = InsertionSpec(seed=1, max_retries=50)
        patch = generate_random_label(GLIOMA, (2, 4), rng)
        center = sample_center(case, patch, spec, np.random.default_rng(0))
        assert all(0 <= c < 32 for c in center)

    def test_full_label_volume_fails(self):
        rng = np.random.default_rng(6)
        case = _case(rng)
        full = case.labels.data.copy()
        head = head_mask_for(case, "nonzero")
        full[head.data] = 2  # lesions everywhere in the head
        case_full = CaseRecord(case.case_id, case.modalities, LabelVolume(case.labels.geometry, full), case.scheme)
        patch = generate_random_label(GLIOMA, (2, 4), rng)
        with pytest.raises(PlacementError):
            sample_center(case_full, patch, InsertionSpec(seed=1, max_retries=30), np.random.default_rng(0))

    def test_fixed_seed_same_center(self):
        rng = np.random.default_rng(7)
        case = _case(rng)
        patch = generate_random_label(GLIOMA, (2, 4), rng)
        spec = InsertionSpec(seed=1)
        c1 = sample_center(case, patch, spec, np.random.default_rng(9))
        c2 = sample_center(case, patch, spec, np.random.default_rng(9))
        assert c1 == c2

    @pytest.mark.parametrize("seed", range(5))
    def test_constraints_hold(self, seed):
        rng = np.random.default_rng(seed)
        case = _case(rng)
        patch = generate_random_label(GLIOMA, (2, 4), rng)
        spec = InsertionSpec(seed=1, min_lesion_distance_voxels=2, max_retries=200)
        head = head_mask_for(case, spec.head_mask_source)
        forbidden = dilate(
            BinaryMask(case.labels.geometry, case.labels.data != 0),
            spec.min_lesion_distance_voxels,
        )
        center = sample_center(case, patch, spec, np.random.default_rng(seed), head, forbidden)
        ext = np.array(patch.shape)
        start = np.array(center) - ext // 2
        window = tuple(slice(int(a), int(a + e)) for a, e in zip(start, ext))
        support = patch != 0
        assert head.data[window][support].all()
        assert not forbidden.data[window][support].any()


class TestInsertLesion:
    def _patch_and_center(self, case, rng):
        labels = generate_random_label(GLIOMA, (2, 4), rng)
        patch = procedural_lesion(labels, len(case.modalities), rng, blend_sigma=1.0)
        center = sample_center(case, patch.labels, InsertionSpec(seed=0, max_retries=100), rng)
        return patch, center

    def test_outside_window_bit_identical(self):
        rng = np.random.default_rng(8)
        case = _case(rng)
        patch, center = self._patch_and_center(case, rng)
        out = insert_lesion(case, patch, center, 3)
        ext = np.array(patch.extents)
        start = np.array(center) - ext // 2
        window = tuple(slice(int(a), int(a + e)) for a, e in zip(start, ext))
        outside = np.ones(case.labels.geometry.extents, bool)
        outside[window] = False
        for name in case.modalities:
            assert np.array_equal(
                out.modalities[name].data[outside], case.modalities[name].data[outside]
            )
        assert np.array_equal(out.labels.data[outside], case.labels.data[outside])

    def test_naming_suffix(self):
        rng = np.random.default_rng(9)
        case = _case(rng)
        patch, center = self._patch_and_center(case, rng)
        assert insert_lesion(case, patch, center, 100).case_id == "00007-100"

    def test_zero_blend_leaves_intensities(self):
        rng = np.random.default_rng(10)
        case = _case(rng)
        labels = generate_random_label(GLIOMA, (2, 4), rng)
        zero_blend = LesionPatch(
            np.full((len(case.modalities),) + labels.shape, 123.0),
            labels,
            np.zeros(labels.shape),
        )
        center = sample_center(case, labels, InsertionSpec(seed=0, max_retries=100), rng)
        out = insert_lesion(case, zero_blend, center, 1)
        for name in case.modalities:
            assert np.array_equal(out.modalities[name].data, case.modalities[name].data)
        assert (out.labels.data != case.labels.data).any()

    def test_labels_written_where_patch_nonzero(self):
        rng = np.random.default_rng(11)
        case = _case(rng)
        patch, center = self._patch_and_center(case, rng)
        out = insert_lesion(case, patch, center, 1)
        ext = np.array(patch.extents)
        start = np.array(center) - ext // 2
        window = tuple(slice(int(a), int(a + e)) for a, e in zip(start, ext))
        support = patch.labels != 0
        assert np.array_equal(out.labels.data[window][support], patch.labels[support])

    def test_window_out_of_bounds_rejected(self):
        rng = np.random.default_rng(12)
        case = _case(rng)
        labels = generate_random_label(GLIOMA, (2, 4), rng)
        patch = procedural_lesion(labels, len(case.modalities), rng, blend_sigma=1.0)
        with pytest.raises(ContractError, match="window"):
            insert_lesion(case, patch, (0, 0, 0), 1)


class TestAugmentDataset:
    def test_bookkeeping_arithmetic(self, tmp_path):
        rng = np.random.default_rng(0)
        make_dataset(tmp_path / "data", rng, 3)
        spec = InsertionSpec(seed=7, copies=2, max_retries=300)
        records = augment_dataset(tmp_path / "data", tmp_path / "out", GLIOMA, spec)
        summary = records[-1]
        attempts = records[:-1]
        assert len(attempts) == 6
        assert summary["original"] == 3
        assert summary["created"] == sum(1 for r in attempts if r["success"])
        assert summary["total"] == summary["original"] + summary["created"]
        if summary["created"] == 6:
            assert summary["total"] == 9

    def test_paper_scale_bookkeeping(self):
        assert manifest_summary(1350, 14301, seed=0)["total"] == 15651
        assert manifest_summary(500, 6970, seed=0)["total"] == 7470

    def test_manifest_deterministic_across_runs(self, tmp_path):
        rng = np.random.default_rng(1)
        make_dataset(tmp_path / "data", rng, 2)
        spec = InsertionSpec(seed=3, copies=2, max_retries=300)
        augment_dataset(tmp_path / "data", tmp_path / "out1", GLIOMA, spec)
        augment_dataset(tmp_path / "data", tmp_path / "out2", GLIOMA, spec)
        m1 = (tmp_path / "out1" / "manifest.jsonl").read_bytes()
        m2 = (tmp_path / "out2" / "manifest.jsonl").read_bytes()
        assert m1 == m2
        # written volumes are byte-identical too
        for sub in sorted((tmp_path / "out1").iterdir()):
            if sub.is_dir():
                for f in sorted(sub.iterdir()):
                    twin = tmp_path / "out2" / sub.name / f.name
                    assert f.read_bytes() == twin.read_bytes()

    def test_workers_do_not_change_output(self, tmp_path):
        rng = np.random.default_rng(2)
        make_dataset(tmp_path / "data", rng, 3)
        spec = InsertionSpec(seed=5, copies=1, max_retries=300)
        augment_dataset(tmp_path / "data", tmp_path / "seq", GLIOMA, spec, workers=1)
        augment_dataset(tmp_path / "data", tmp_path / "par", GLIOMA, spec, workers=3)
        assert (tmp_path / "seq" / "manifest.jsonl").read_bytes() == (
            tmp_path / "par" / "manifest.jsonl"
        ).read_bytes()

    def test_inserted_labels_respect_head_and_existing(self, tmp_path):
        rng = np.random.default_rng(3)
        make_dataset(tmp_path / "data", rng, 2)
        spec = InsertionSpec(seed=11, copies=3, max_retries=300)
        records = augment_dataset(tmp_path / "data", tmp_path / "out", GLIOMA, spec)
        cases = {p.case_id: p for p in scan_dataset(tmp_path / "data", GLIOMA)}
        for record in records[:-1]:
            if not record["success"]:
                continue
            original = load_case(cases[record["case"]], GLIOMA)
            new_paths = scan_dataset(tmp_path / "out", GLIOMA)
            new = load_case(
                next(p for p in new_paths if p.case_id == record["new_case"]), GLIOMA
            )
            head = head_mask_for(original, spec.head_mask_source)
            inserted = new.labels.data != original.labels.data
            assert inserted.any()
            assert head.data[inserted].all()
            assert (original.labels.data[inserted] == 0).all()

    def test_meningioma_dataset(self, tmp_path):
        rng = np.random.default_rng(4)
        make_dataset(tmp_path / "data", rng, 2, scheme_name="meningioma-rt")
        spec = InsertionSpec(seed=13, copies=1, max_retries=300)
        records = augment_dataset(tmp_path / "data", tmp_path / "out", MENINGIOMA_RT, spec)
        assert records[-1]["created"] >= 1

    def test_label_sources_recorded(self, tmp_path):
        rng = np.random.default_rng(5)
        make_dataset(tmp_path / "data", rng, 3)
        spec = InsertionSpec(seed=17, copies=4, max_retries=300, use_generated_label_p=0.5)
        records = augment_dataset(tmp_path / "data", tmp_path / "out", GLIOMA, spec)
        sources = {r["label_source"] for r in records[:-1]}
        assert sources <= {"generated", "real", "generated-fallback"}
        real = [r for r in records[:-1] if r["label_source"] == "real"]
        for r in real:
            assert r["donor"] is not None and r["donor"] != r["case"]

    def test_manifest_is_json_lines(self, tmp_path):
        rng = np.random.default_rng(6)
        make_dataset(tmp_path / "data", rng, 2)
        spec = InsertionSpec(seed=19, copies=1, max_retries=300)
        augment_dataset(tmp_path / "data", tmp_path / "out", GLIOMA, spec)
        lines = (tmp_path / "out" / "manifest.jsonl").read_text().splitlines()
        parsed = [json.loads(line) for line in lines]
        assert parsed[-1]["summary"] is True
        assert all("case" in p for p in parsed[:-1])

    def test_empty_dataset_rejected(self, tmp_path):
        (tmp_path / "data").mkdir()
        with pytest.raises(ContractError):
            augment_dataset(tmp_path / "data", tmp_path / "out", GLIOMA, InsertionSpec(seed=0))
