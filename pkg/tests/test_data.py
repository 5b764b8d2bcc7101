import numpy as np
import pytest

from app.core.exceptions import ArgumentError, DatasetIntegrityError
from app.models.dataset import FrameTag, SemiSupervisedDataset, SliceRecord, SplitTag, SubsetSpec
from app.services.data_service import (
    dataset_stats,
    es_frame_index,
    generate_synthetic_dataset,
    sample_labeled_subset,
    split_by_patient,
)


def test_synthetic_dataset_labels_only_ed_and_es(tiny_dataset) -> None:
    assert len(tiny_dataset) == 4 * 4 * 2
    assert tiny_dataset.n_labeled == 4 * 2 * 2
    es = es_frame_index(4)
    for record in tiny_dataset.slices:
        assert record.is_labeled == (record.frame_index in (0, es))
        assert record.image.dtype == np.float32
        assert 0.0 <= record.image.min() and record.image.max() <= 1.0
        if record.is_labeled:
            assert set(np.unique(record.mask)) <= {0, 1, 2, 3}


def test_synthetic_dataset_is_seeded() -> None:
    a = generate_synthetic_dataset(2, 3, 2, 16, seed=4)
    b = generate_synthetic_dataset(2, 3, 2, 16, seed=4)
    c = generate_synthetic_dataset(2, 3, 2, 16, seed=5)
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a.slices, b.slices))
    assert not all(np.array_equal(x.image, y.image) for x, y in zip(a.slices, c.slices))


def test_single_patient_is_a_minimal_set() -> None:
    dataset = generate_synthetic_dataset(1, 2, 1, 16, seed=0)
    assert len(dataset) == 2
    assert dataset.n_labeled == 2
    assert dataset.patient_ids == ["patient0"]


@pytest.mark.parametrize("args", [(0, 4, 1, 16), (1, 1, 1, 16), (1, 4, 1, 8)])
def test_synthetic_dataset_rejects_bad_shapes(args) -> None:
    with pytest.raises(ArgumentError):
        generate_synthetic_dataset(*args, seed=0)


def test_slice_record_mask_must_match_frame_tag() -> None:
    image = np.zeros((8, 8), dtype=np.float32)
    with pytest.raises(DatasetIntegrityError):
        SliceRecord(image=image, mask=np.zeros((8, 8), np.uint8), patient_id="p", frame_tag=FrameTag.OTHER, slice_index=0)
    with pytest.raises(DatasetIntegrityError):
        SliceRecord(image=image, mask=None, patient_id="p", frame_tag=FrameTag.ED, slice_index=0)
    with pytest.raises(DatasetIntegrityError):
        SliceRecord(image=image, mask=np.zeros((4, 4), np.uint8), patient_id="p", frame_tag=FrameTag.ES, slice_index=0)


@pytest.mark.parametrize("value", [1.5, -0.1, float("nan")])
def test_slice_record_image_must_lie_in_unit_range(value) -> None:
    image = np.zeros((8, 8), dtype=np.float32)
    image[3, 4] = value
    with pytest.raises(DatasetIntegrityError, match=r"\[0, 1\]"):
        SliceRecord(image=image, mask=None, patient_id="p", frame_tag=FrameTag.OTHER, slice_index=0)


def test_split_is_patient_disjoint_and_seeded(tiny_dataset, tiny_splits) -> None:
    patients = {tag: set(ds.patient_ids) for tag, ds in tiny_splits.items()}
    assert len(patients[SplitTag.VAL]) == 1 and len(patients[SplitTag.TEST]) == 1
    assert len(patients[SplitTag.TRAIN]) == 2
    assert not (patients[SplitTag.TRAIN] & patients[SplitTag.VAL])
    assert not (patients[SplitTag.TRAIN] & patients[SplitTag.TEST])
    assert sum(len(ds) for ds in tiny_splits.values()) == len(tiny_dataset)
    again = split_by_patient(tiny_dataset, (0.5, 0.25, 0.25), seed=0)
    assert {t: d.patient_ids for t, d in again.items()} == {t: d.patient_ids for t, d in tiny_splits.items()}


def test_two_patients_stay_in_train(tiny_dataset) -> None:
    pair = tiny_dataset.select_patients(tiny_dataset.patient_ids[:2], None)
    splits = split_by_patient(pair, (0.7, 0.15, 0.15), seed=1)
    assert len(splits[SplitTag.TRAIN]) == len(pair)
    assert len(splits[SplitTag.VAL]) == 0


def test_zero_test_fraction_leaves_test_empty(tiny_dataset) -> None:
    splits = split_by_patient(tiny_dataset, (0.75, 0.25, 0.0), seed=0)
    assert len(splits[SplitTag.TEST]) == 0
    assert len(splits[SplitTag.VAL].patient_ids) == 1
    assert len(splits[SplitTag.TRAIN].patient_ids) == 3


@pytest.mark.parametrize("n_labeled, expected", [(100, 7), (200, 14), (1400, 98)])
def test_fraction_counts_ignore_float_noise(n_labeled, expected) -> None:
    assert SubsetSpec(fraction=0.07).resolve(n_labeled) == expected


def test_fraction_counts_still_round_up() -> None:
    assert SubsetSpec(fraction=0.071).resolve(100) == 8
    assert SubsetSpec(fraction=0.5).resolve(3) == 2


def test_subset_sampling(tiny_dataset) -> None:
    indices = sample_labeled_subset(tiny_dataset, SubsetSpec(count=5, seed=3))
    assert indices == sorted(set(indices))
    assert len(indices) == 5
    assert all(tiny_dataset[i].is_labeled for i in indices)
    assert indices == sample_labeled_subset(tiny_dataset, SubsetSpec(count=5, seed=3))
    assert len(sample_labeled_subset(tiny_dataset, SubsetSpec(fraction=0.1))) == 2


def test_subset_larger_than_labeled_pool_fails(tiny_dataset) -> None:
    with pytest.raises(ArgumentError):
        sample_labeled_subset(tiny_dataset, SubsetSpec(count=tiny_dataset.n_labeled + 1))
    with pytest.raises(ArgumentError):
        SubsetSpec(count=2, fraction=0.5)


def test_dataset_stats(tiny_splits) -> None:
    stats = dataset_stats(*tiny_splits.values())
    assert stats.n_slices == 32
    assert stats.n_labeled == 16
    assert stats.n_patients == 4
    assert stats.labeled_fraction == pytest.approx(0.5)
    assert stats.slices_per_split == {"TRAIN": 16, "VAL": 8, "TEST": 8}
    assert sum(stats.class_frequencies) == pytest.approx(1.0)
    assert all(f > 0 for f in stats.class_frequencies)


def test_empty_dataset_stats() -> None:
    stats = dataset_stats(SemiSupervisedDataset(slices=()))
    assert stats.n_slices == 0
    assert stats.labeled_fraction == 0.0
