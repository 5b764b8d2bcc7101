import numpy as np
import pytest

from app.core.exceptions import ArgumentError
from app.core.seeding import numpy_generator
from app.models.schemas import AugmentConfig
from app.services.augment_service import (
    augment_labeled_pair,
    make_view_pair,
    resize_for_eval,
    sample_geometry,
)


def _labeled(tiny_dataset):
    return tiny_dataset[tiny_dataset.labeled_indices[0]]


def test_view_pair_shapes_and_range(tiny_dataset) -> None:
    cfg = AugmentConfig(output_size=24)
    pair = make_view_pair(tiny_dataset[0].image, cfg, numpy_generator(0, "views"))
    for view in (pair.view1, pair.view2):
        assert view.shape == (24, 24)
        assert view.dtype == np.float32
        assert 0.0 <= view.min() and view.max() <= 1.0
    assert not np.array_equal(pair.view1, pair.view2)


def test_view_pair_is_reproducible(tiny_dataset) -> None:
    cfg = AugmentConfig(output_size=32)
    a = make_view_pair(tiny_dataset[3].image, cfg, numpy_generator(1, "views", 0, 3))
    b = make_view_pair(tiny_dataset[3].image, cfg, numpy_generator(1, "views", 0, 3))
    np.testing.assert_array_equal(a.view1, b.view1)
    np.testing.assert_array_equal(a.view2, b.view2)


def test_identity_chain_keeps_image(tiny_dataset) -> None:
    record = _labeled(tiny_dataset)
    image, mask = augment_labeled_pair(record.image, record.mask, AugmentConfig.identity(32), numpy_generator(0))
    np.testing.assert_allclose(image, record.image, atol=1e-6)
    np.testing.assert_array_equal(mask, record.mask)


def test_labeled_pair_keeps_class_ids(tiny_dataset) -> None:
    record = _labeled(tiny_dataset)
    cfg = AugmentConfig(output_size=32)
    for k in range(10):
        _, mask = augment_labeled_pair(record.image, record.mask, cfg, numpy_generator(k))
        assert mask.shape == (32, 32)
        assert set(np.unique(mask)) <= set(np.unique(record.mask))


def test_flip_is_shared_between_image_and_mask() -> None:
    image = np.zeros((16, 16), dtype=np.float32)
    image[:, :4] = 1.0
    mask = (image > 0).astype(np.uint8)
    cfg = AugmentConfig(
        output_size=16,
        crop_scale_range=(1.0, 1.0),
        hflip_prob=1.0,
        brightness_delta_max=0.0,
        contrast_factor_range=(1.0, 1.0),
    )
    out_image, out_mask = augment_labeled_pair(image, mask, cfg, numpy_generator(0))
    assert out_mask[:, -4:].all() and not out_mask[:, :4].any()
    np.testing.assert_array_equal(out_image > 0.5, out_mask.astype(bool))


def test_crop_stays_inside_the_image() -> None:
    cfg = AugmentConfig(crop_scale_range=(0.1, 1.0))
    rng = numpy_generator(2)
    for _ in range(100):
        g = sample_geometry((20, 30), cfg, rng)
        assert 1 <= g.side <= 20
        assert g.top + g.side <= 20 and g.left + g.side <= 30


def test_bad_inputs_are_rejected() -> None:
    with pytest.raises(ArgumentError):
        make_view_pair(np.zeros((0, 4), np.float32), AugmentConfig(), numpy_generator(0))
    with pytest.raises(ArgumentError):
        augment_labeled_pair(np.zeros((4, 4)), np.zeros((2, 2), np.uint8), AugmentConfig(), numpy_generator(0))


def test_eval_resize_is_deterministic(tiny_dataset) -> None:
    record = _labeled(tiny_dataset)
    image, mask = resize_for_eval(record.image, record.mask, 16)
    assert image.shape == mask.shape == (16, 16)
    again = resize_for_eval(record.image, record.mask, 16)
    np.testing.assert_array_equal(image, again[0])
