from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from app.core.exceptions import DatasetFormatError, DatasetIntegrityError, RefusalError
from app.models.dataset import SplitTag
from app.repositories.dataset_repository import (
    MANIFEST_NAME,
    load_directory_dataset,
    load_directory_splits,
    read_grayscale,
    write_directory_dataset,
)


def test_directory_round_trip_is_lossless(tmp_path: Path, tiny_splits) -> None:
    manifest = write_directory_dataset(tiny_splits, tmp_path / "data")
    assert manifest.name == MANIFEST_NAME
    loaded = load_directory_splits(tmp_path / "data")
    for tag in SplitTag:
        original, restored = tiny_splits[tag], loaded[tag]
        assert len(original) == len(restored)
        assert restored.labeled_indices == original.labeled_indices
        for a, b in zip(original.slices, restored.slices):
            assert a.key == b.key
            assert a.frame_tag == b.frame_tag
            np.testing.assert_array_equal(a.image, b.image)
            if a.mask is not None:
                np.testing.assert_array_equal(a.mask, b.mask)


def test_pooled_load_covers_every_split(tmp_path: Path, tiny_dataset, tiny_splits) -> None:
    write_directory_dataset(tiny_splits, tmp_path)
    pooled = load_directory_dataset(tmp_path)
    assert pooled.split_tag is None
    assert len(pooled) == len(tiny_dataset)


def test_existing_target_is_refused_without_force(tmp_path: Path, tiny_splits) -> None:
    write_directory_dataset(tiny_splits, tmp_path)
    with pytest.raises(RefusalError):
        write_directory_dataset(tiny_splits, tmp_path)
    write_directory_dataset(tiny_splits, tmp_path, force=True)


def test_mask_shape_mismatch_names_both_files(tmp_path: Path) -> None:
    (tmp_path / "p0").mkdir()
    Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(tmp_path / "p0" / "a.png")
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(tmp_path / "p0" / "a_mask.png")
    (tmp_path / MANIFEST_NAME).write_text(
        "file=p0/a.png patient_id=p0 frame_tag=ED slice_index=0 mask=p0/a_mask.png\n", encoding="utf-8"
    )
    with pytest.raises(DatasetIntegrityError) as excinfo:
        load_directory_dataset(tmp_path)
    assert "a_mask.png" in excinfo.value.detail and "a.png" in excinfo.value.detail


def test_malformed_manifest_line(tmp_path: Path) -> None:
    (tmp_path / MANIFEST_NAME).write_text("# header\nfile=x.png patient_id\n", encoding="utf-8")
    with pytest.raises(DatasetFormatError, match="line 2"):
        load_directory_dataset(tmp_path)


def test_missing_manifest(tmp_path: Path) -> None:
    with pytest.raises(DatasetFormatError):
        load_directory_splits(tmp_path)


def test_patient_in_two_splits_is_rejected(tmp_path: Path) -> None:
    (tmp_path / "p0").mkdir()
    for name in ("a", "b"):
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(tmp_path / "p0" / f"{name}.png")
    (tmp_path / MANIFEST_NAME).write_text(
        "file=p0/a.png patient_id=p0 frame_tag=OTHER slice_index=0 split=TRAIN\n"
        "file=p0/b.png patient_id=p0 frame_tag=OTHER slice_index=1 split=TEST\n",
        encoding="utf-8",
    )
    with pytest.raises(DatasetIntegrityError, match="p0"):
        load_directory_splits(tmp_path)


def test_eight_bit_images_are_normalized(tmp_path: Path) -> None:
    Image.fromarray(np.full((4, 4), 255, dtype=np.uint8)).save(tmp_path / "white.png")
    image = read_grayscale(tmp_path / "white.png")
    assert image.dtype == np.float32
    assert float(image.max()) == 1.0


def test_32_bit_images_outside_the_16_bit_range_are_rejected(tmp_path: Path) -> None:
    path = tmp_path / "wide.tiff"
    Image.fromarray(np.array([[0, 70000]], dtype=np.int32)).save(path)
    with pytest.raises(DatasetFormatError, match="16-bit range"):
        read_grayscale(path)


def test_32_bit_images_inside_the_16_bit_range_are_normalized(tmp_path: Path) -> None:
    path = tmp_path / "narrow.tiff"
    Image.fromarray(np.array([[0, 65535]], dtype=np.int32)).save(path)
    np.testing.assert_array_equal(read_grayscale(path), np.array([[0.0, 1.0]], dtype=np.float32))
