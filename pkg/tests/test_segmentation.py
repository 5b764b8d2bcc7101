import logging
import math

import numpy as np
import pytest
import torch

from app.core.exceptions import ArgumentError
from app.core.seeding import torch_generator
from app.models.dataset import SemiSupervisedDataset, SplitTag
from app.models.schemas import EncoderInit, SegConfig
from app.repositories.metrics_repository import JsonlMetricsSink, read_metrics
from app.services.segmentation_service import (
    IoUAverage,
    cosine_annealing_lr,
    finetune,
    iou_score,
    jaccard_loss,
    soft_iou,
)


def _probs(seed: int, shape=(2, 4, 8, 8)) -> torch.Tensor:
    logits = torch.randn(*shape, generator=torch_generator(seed, "logits"), dtype=torch.float64)
    return torch.softmax(logits, dim=1)


def _target(seed: int, shape=(2, 8, 8)) -> torch.Tensor:
    return torch.randint(0, 4, shape, generator=torch_generator(seed, "target"))


def test_jaccard_loss_complements_soft_iou() -> None:
    for seed in range(10):
        probs, target = _probs(seed), _target(seed)
        assert abs(float(jaccard_loss(probs, target) + soft_iou(probs, target)) - 1.0) <= 1e-9


def test_jaccard_loss_is_zero_for_a_perfect_prediction() -> None:
    target = _target(0)
    one_hot = torch.nn.functional.one_hot(target, 4).permute(0, 3, 1, 2).double()
    assert float(jaccard_loss(one_hot, target)) == pytest.approx(0.0, abs=1e-9)


def test_jaccard_gradients_match_finite_differences() -> None:
    target = _target(1, shape=(1, 4, 4))
    logits = torch.randn(1, 4, 4, 4, generator=torch_generator(1), dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x: jaccard_loss(torch.softmax(x, dim=1), target), (logits,))


def test_jaccard_rejects_mismatched_shapes() -> None:
    with pytest.raises(ArgumentError):
        jaccard_loss(_probs(0), _target(0, shape=(2, 4, 4)))


def test_iou_skips_absent_classes() -> None:
    pred = np.array([[0, 1], [1, 1]])
    target = np.array([[0, 1], [2, 2]])
    assert iou_score(pred, target) == pytest.approx((1.0 + 1.0 / 3.0 + 0.0) / 3.0)
    per_class = iou_score(pred, target, average=IoUAverage.PER_CLASS)
    np.testing.assert_allclose(per_class[:3], [1.0, 1.0 / 3.0, 0.0])
    assert math.isnan(per_class[3])


def test_iou_of_identical_masks_is_one() -> None:
    mask = np.array([[0, 3], [3, 0]])
    assert iou_score(mask, mask) == 1.0


def test_cosine_annealing_restarts() -> None:
    cfg = SegConfig(lr_max=1e-3, lr_min=1e-5, anneal_period_steps=10)
    assert cosine_annealing_lr(0, cfg) == pytest.approx(1e-3)
    assert cosine_annealing_lr(5, cfg) == pytest.approx((1e-3 + 1e-5) / 2)
    assert cosine_annealing_lr(9, cfg) > 1e-5
    assert cosine_annealing_lr(10, cfg) == pytest.approx(1e-3)
    assert cosine_annealing_lr(23, cfg) == pytest.approx(cosine_annealing_lr(3, cfg))


def test_cosine_annealing_guards() -> None:
    with pytest.raises(ArgumentError):
        cosine_annealing_lr(0, SegConfig())
    with pytest.raises(ArgumentError):
        cosine_annealing_lr(-1, SegConfig(anneal_period_steps=4))


def _subset(splits, count: int = 3):
    return list(splits[SplitTag.TRAIN].labeled_indices[:count])


def test_finetune_curve_hits_the_step_budget(tiny_splits, seg_cfg, augment_cfg, encoder_cfg, tiny_encoder) -> None:
    train = tiny_splits[SplitTag.TRAIN]
    result = finetune(
        tiny_encoder, _subset(tiny_splits), train, seg_cfg, augment_cfg, encoder_cfg, seed=0,
        eval_dataset=tiny_splits[SplitTag.VAL], test_dataset=tiny_splits[SplitTag.TEST],
    )
    assert result.curve.steps == [2, 4, 6]
    assert all(0.0 <= v <= 1.0 for v in result.curve.eval_iou)
    assert all(0.0 <= v <= 1.0 for v in result.curve.eval_loss)
    assert result.test_iou is not None and 0.0 <= result.test_iou <= 1.0
    assert result.weights.meta["step"] == 6

    odd = finetune(
        tiny_encoder, _subset(tiny_splits), train, seg_cfg.model_copy(update={"total_steps": 5}),
        augment_cfg, encoder_cfg, seed=0, eval_dataset=tiny_splits[SplitTag.VAL],
    )
    assert odd.curve.steps == [2, 4, 5]
    assert odd.test_loss is None


def test_finetune_budget_does_not_depend_on_subset_size(tiny_splits, seg_cfg, augment_cfg, encoder_cfg, tiny_encoder) -> None:
    train = tiny_splits[SplitTag.TRAIN]
    for count in (1, 8):
        result = finetune(
            tiny_encoder, _subset(tiny_splits, count), train, seg_cfg, augment_cfg, encoder_cfg, seed=1,
            eval_dataset=tiny_splits[SplitTag.VAL],
        )
        assert result.curve.steps[-1] == seg_cfg.total_steps


def test_finetune_is_deterministic(tmp_path, tiny_splits, seg_cfg, augment_cfg, encoder_cfg, tiny_encoder) -> None:
    train = tiny_splits[SplitTag.TRAIN]
    results = []
    for name in ("a", "b"):
        with JsonlMetricsSink(tmp_path / f"{name}.jsonl") as sink:
            results.append(finetune(
                tiny_encoder, _subset(tiny_splits), train, seg_cfg, augment_cfg, encoder_cfg, seed=3,
                eval_dataset=tiny_splits[SplitTag.VAL], test_dataset=tiny_splits[SplitTag.TEST],
                metrics_sink=sink,
            ))
    assert results[0].weights.digest() == results[1].weights.digest()
    assert results[0].curve == results[1].curve
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    rows = read_metrics(tmp_path / "a.jsonl")
    assert len(rows) == 3 * 3 + 2
    assert {r["metric_name"] for r in rows if r["split"] == "eval"} == {"eval_loss", "eval_iou"}
    assert [r["step"] for r in rows if r["split"] == "test"] == [6, 6]


def test_finetune_seed_changes_the_run(tiny_splits, seg_cfg, augment_cfg, encoder_cfg, tiny_encoder) -> None:
    train = tiny_splits[SplitTag.TRAIN]
    a = finetune(tiny_encoder, _subset(tiny_splits), train, seg_cfg, augment_cfg, encoder_cfg, seed=4)
    b = finetune(tiny_encoder, _subset(tiny_splits), train, seg_cfg, augment_cfg, encoder_cfg, seed=5)
    assert a.weights.digest() != b.weights.digest()


def test_random_init_ignores_encoder_source(tiny_splits, seg_cfg, augment_cfg, encoder_cfg, tiny_encoder) -> None:
    cfg = seg_cfg.model_copy(update={"encoder_init": EncoderInit.RANDOM})
    train = tiny_splits[SplitTag.TRAIN]
    a = finetune(None, _subset(tiny_splits), train, cfg, augment_cfg, encoder_cfg, seed=2)
    b = finetune(tiny_encoder, _subset(tiny_splits), train, cfg, augment_cfg, encoder_cfg, seed=2)
    assert a.weights.digest() == b.weights.digest()


def test_finetune_without_eval_split_uses_the_subset(caplog, tiny_splits, seg_cfg, augment_cfg, encoder_cfg, tiny_encoder) -> None:
    train = tiny_splits[SplitTag.TRAIN]
    subset = _subset(tiny_splits)
    with caplog.at_level(logging.WARNING):
        fallback = finetune(tiny_encoder, subset, train, seg_cfg, augment_cfg, encoder_cfg, seed=0)
    assert "training subset" in caplog.text
    explicit = finetune(
        tiny_encoder, subset, train, seg_cfg, augment_cfg, encoder_cfg, seed=0,
        eval_dataset=SemiSupervisedDataset(slices=tuple(train[i] for i in subset)),
    )
    assert fallback.curve == explicit.curve


def test_finetune_argument_errors(tiny_splits, seg_cfg, augment_cfg, encoder_cfg, tiny_encoder) -> None:
    train = tiny_splits[SplitTag.TRAIN]
    unlabeled = [i for i in range(len(train)) if i not in set(train.labeled_indices)]
    with pytest.raises(ArgumentError):
        finetune(tiny_encoder, [], train, seg_cfg, augment_cfg, encoder_cfg, seed=0)
    with pytest.raises(ArgumentError):
        finetune(tiny_encoder, unlabeled[:1], train, seg_cfg, augment_cfg, encoder_cfg, seed=0)
    with pytest.raises(ArgumentError):
        finetune(None, _subset(tiny_splits), train, seg_cfg, augment_cfg, encoder_cfg, seed=0)
