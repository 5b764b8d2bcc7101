"""
Downstream segmentation: soft Jaccard loss, IoU metric, periodic cosine
annealing and fixed-step-budget U-Net fine-tuning.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader, Dataset

from app.core.exceptions import ArgumentError, TrainingDivergedError
from app.core.logging import get_logger
from app.core.seeding import numpy_generator, torch_generator
from app.models.dataset import N_CLASSES, SemiSupervisedDataset
from app.models.records import LearningCurve
from app.models.schemas import AugmentConfig, EncoderConfig, EncoderInit, SegConfig
from app.models.weights import NetworkWeights
from app.repositories.base import MetricsSinkBase, NullMetricsSink
from app.services.augment_service import augment_labeled_pair, resize_for_eval
from app.services.network_service import (
    build_encoder,
    create_unet_module,
    match_input_channels,
    snapshot_unet,
    transfer_encoder_weights,
)

logger = get_logger(__name__)

EVAL_BATCH_SIZE = 32

ArrayLike = Union[np.ndarray, torch.Tensor]


class IoUAverage(str, Enum):
    MACRO = "MACRO"
    PER_CLASS = "PER_CLASS"


# ----- Loss and metrics -----


def _check_prediction(pred_probs: torch.Tensor, target: torch.Tensor) -> None:
    if pred_probs.ndim != 4 or target.ndim != 3:
        raise ArgumentError(
            f"Expected B x C x H x W probabilities and B x H x W targets, "
            f"got {tuple(pred_probs.shape)} and {tuple(target.shape)}"
        )
    b, _, h, w = pred_probs.shape
    if tuple(target.shape) != (b, h, w):
        raise ArgumentError(f"Target shape {tuple(target.shape)} does not match {(b, h, w)}")


def soft_iou_terms(
    pred_probs: torch.Tensor,
    target: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-class (sum p*t, sum p, sum t) over batch and pixels."""
    _check_prediction(pred_probs, target)
    n_classes = pred_probs.shape[1]
    one_hot = F.one_hot(target.long(), n_classes).permute(0, 3, 1, 2).to(pred_probs.dtype)
    dims = (0, 2, 3)
    return (pred_probs * one_hot).sum(dims), pred_probs.sum(dims), one_hot.sum(dims)


def _soft_iou_from_terms(
    intersection: torch.Tensor,
    pred_sum: torch.Tensor,
    target_sum: torch.Tensor,
    eps: float,
) -> torch.Tensor:
    union = pred_sum + target_sum - intersection
    return ((intersection + eps) / (union + eps)).mean()


def soft_iou(pred_probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Class-averaged soft intersection over union."""
    return _soft_iou_from_terms(*soft_iou_terms(pred_probs, target), eps)


def jaccard_loss(pred_probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """
    ``1 - soft_iou``: one minus the class mean of
    ``(sum p*t + eps) / (sum p + sum t - sum p*t + eps)``.

    Args:
        pred_probs: B x C x H x W class probabilities (softmax applied).
        target: B x H x W class ids.
        eps: Smoothing term guarding empty classes.

    Raises:
        ArgumentError: On shape mismatch.
    """
    return 1.0 - soft_iou(pred_probs, target, eps)


def confusion_counts(pred_labels: ArrayLike, target: ArrayLike, n_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class intersection and union pixel counts."""
    pred = np.asarray(pred_labels.cpu() if isinstance(pred_labels, torch.Tensor) else pred_labels).ravel()
    true = np.asarray(target.cpu() if isinstance(target, torch.Tensor) else target).ravel()
    if pred.shape != true.shape:
        raise ArgumentError(f"Label shapes differ: {pred.shape} vs {true.shape}")
    pred_counts = np.bincount(pred, minlength=n_classes)[:n_classes]
    true_counts = np.bincount(true, minlength=n_classes)[:n_classes]
    intersection = np.bincount(pred[pred == true], minlength=n_classes)[:n_classes]
    union = pred_counts + true_counts - intersection
    return intersection.astype(np.int64), union.astype(np.int64)


def iou_from_counts(
    intersection: np.ndarray,
    union: np.ndarray,
    average: IoUAverage = IoUAverage.MACRO,
) -> Union[float, np.ndarray]:
    present = union > 0
    per_class = np.full(len(union), np.nan)
    per_class[present] = intersection[present] / union[present]
    if IoUAverage(average) == IoUAverage.PER_CLASS:
        return per_class
    if not present.any():
        return 0.0
    return float(per_class[present].mean())


def iou_score(
    pred_labels: ArrayLike,
    target: ArrayLike,
    n_classes: int = N_CLASSES,
    average: IoUAverage = IoUAverage.MACRO,
) -> Union[float, np.ndarray]:
    """
    Hard intersection over union.

    Classes absent from both prediction and target are excluded from the
    macro average and reported as NaN per class.
    """
    return iou_from_counts(*confusion_counts(pred_labels, target, n_classes), average)


def cosine_annealing_lr(step: int, cfg: SegConfig) -> float:
    """
    Periodic cosine annealing with restarts:
    ``lr_min + (lr_max - lr_min) * (1 + cos(pi * t / T)) / 2`` with
    ``t = step mod T``.

    Raises:
        ArgumentError: If step < 0 or the period has not been resolved.
    """
    if step < 0:
        raise ArgumentError(f"step must be >= 0, got {step}")
    period = cfg.anneal_period_steps
    if period is None:
        raise ArgumentError("anneal_period_steps is unresolved; call SegConfig.resolve first")
    t = step % period
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t / period))


# ----- Fine-tuning -----


@dataclass
class FinetuneResult:
    """Learning curve, final U-Net weights and optional test-split metrics."""

    curve: LearningCurve
    weights: NetworkWeights
    test_loss: Optional[float] = None
    test_iou: Optional[float] = None


class LabeledBatchStream(Dataset):
    """
    Augmented training samples for a fixed step budget.

    Position ``p`` of the stream is a subset member chosen by cycling seeded
    permutations of the subset; its augmentation generator derives from
    ``(seed, "augment", p)``.
    """

    def __init__(
        self,
        dataset: SemiSupervisedDataset,
        subset: Sequence[int],
        n_samples: int,
        augment: AugmentConfig,
        seed: int,
    ):
        self.dataset = dataset
        self.augment = augment
        self.seed = seed
        rng = numpy_generator(seed, "batches")
        order: List[int] = []
        while len(order) < n_samples:
            order.extend(int(i) for i in rng.permutation(np.asarray(subset)))
        self.order = order[:n_samples]

    def __len__(self) -> int:
        return len(self.order)

    def __getitem__(self, position: int) -> Tuple[torch.Tensor, torch.Tensor]:
        record = self.dataset[self.order[position]]
        image, mask = augment_labeled_pair(
            record.image, record.mask, self.augment, numpy_generator(self.seed, "augment", position)
        )
        return torch.from_numpy(image)[None], torch.from_numpy(mask)


def _eval_tensors(dataset: SemiSupervisedDataset, size: int) -> Tuple[torch.Tensor, torch.Tensor]:
    pairs = [resize_for_eval(dataset[i].image, dataset[i].mask, size) for i in dataset.labeled_indices]
    images = torch.from_numpy(np.stack([p[0] for p in pairs]))[:, None]
    masks = torch.from_numpy(np.stack([p[1] for p in pairs]))
    return images, masks


@torch.no_grad()
def evaluate(
    unet: nn.Module,
    images: torch.Tensor,
    masks: torch.Tensor,
    n_classes: int,
    in_channels: int,
    eps: float,
) -> Tuple[float, float]:
    """
    Jaccard loss and macro IoU over a whole split.

    Sums run over every pixel of the split, so the result does not depend on
    the evaluation batch size.
    """
    was_training = unet.training
    unet.eval()
    inter = torch.zeros(n_classes, dtype=torch.float64)
    pred_sum = torch.zeros(n_classes, dtype=torch.float64)
    target_sum = torch.zeros(n_classes, dtype=torch.float64)
    hard_inter = np.zeros(n_classes, dtype=np.int64)
    hard_union = np.zeros(n_classes, dtype=np.int64)
    for start in range(0, len(images), EVAL_BATCH_SIZE):
        batch = match_input_channels(images[start:start + EVAL_BATCH_SIZE], in_channels)
        target = masks[start:start + EVAL_BATCH_SIZE]
        logits = unet(batch)
        terms = soft_iou_terms(torch.softmax(logits, dim=1).double(), target)
        inter += terms[0]
        pred_sum += terms[1]
        target_sum += terms[2]
        i, u = confusion_counts(logits.argmax(dim=1), target, n_classes)
        hard_inter += i
        hard_union += u
    unet.train(was_training)
    loss = 1.0 - float(_soft_iou_from_terms(inter, pred_sum, target_sum, eps))
    return loss, float(iou_from_counts(hard_inter, hard_union))


def _freeze_batchnorm(unet: nn.Module) -> None:
    for module in unet.modules():
        if isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d)):
            module.eval()
            for param in module.parameters():
                param.requires_grad_(False)


def _resolve_encoder(
    encoder_source: Optional[NetworkWeights],
    encoder_cfg: EncoderConfig,
    cfg: SegConfig,
    seed: int,
) -> NetworkWeights:
    if cfg.encoder_init == EncoderInit.RANDOM:
        return build_encoder(encoder_cfg, torch_generator(seed, "encoder"))
    if encoder_source is None:
        raise ArgumentError("encoder_init is FROM_CHECKPOINT but no encoder weights were given")
    return transfer_encoder_weights(encoder_source, encoder_cfg)


def finetune(
    encoder_source: Optional[NetworkWeights],
    subset_indices: Sequence[int],
    dataset: SemiSupervisedDataset,
    cfg: SegConfig,
    augment: AugmentConfig,
    encoder_cfg: EncoderConfig,
    seed: int,
    eval_dataset: Optional[SemiSupervisedDataset] = None,
    test_dataset: Optional[SemiSupervisedDataset] = None,
    metrics_sink: Optional[MetricsSinkBase] = None,
) -> FinetuneResult:
    """
    Train a U-Net on a labeled subset for exactly ``cfg.total_steps`` steps.

    The encoder comes from ``encoder_source`` through the transfer rules (or
    fresh Kaiming init for ``encoder_init=RANDOM``); the decoder is always
    freshly initialized from the ``(seed, "decoder")`` stream. The subset is
    cycled until the budget is spent, so the step count never depends on the
    subset size. The curve is sampled every ``eval_every_steps`` steps and at
    the final step.

    Args:
        encoder_source: Pretrained encoder snapshot.
        subset_indices: Labeled indices of ``dataset`` to train on.
        dataset: Training split.
        cfg: Fine-tuning configuration; an unset ``total_steps`` resolves
            against the number of labeled slices in ``dataset``.
        augment: Augmentation chain applied to each training sample.
        encoder_cfg: Target encoder architecture (single channel).
        seed: Root of the decoder, batch-order and augmentation streams.
        eval_dataset: Split the learning curve is measured on (defaults to
            the training subset).
        test_dataset: Optional split for the final test metrics.
        metrics_sink: Receives ``(step, split, metric_name, value)`` rows.

    Returns:
        FinetuneResult.

    Raises:
        ArgumentError: On an empty subset or unlabeled indices.
        TransferError: If the encoder snapshot does not fit ``encoder_cfg``.
        TrainingDivergedError: If the training loss becomes non-finite.
    """
    if len(subset_indices) == 0:
        raise ArgumentError("finetune needs a non-empty labeled subset")
    labeled = set(dataset.labeled_indices)
    if any(i not in labeled for i in subset_indices):
        raise ArgumentError("finetune subset contains unlabeled or out-of-range indices")

    cfg = cfg.resolve(dataset.n_labeled)
    sink = metrics_sink or NullMetricsSink()
    n_classes = cfg.decoder.out_classes

    encoder = _resolve_encoder(encoder_source, encoder_cfg, cfg, seed)
    unet = create_unet_module(encoder, cfg.decoder, torch_generator(seed, "decoder"))
    unet.train()
    if cfg.freeze_batchnorm:
        _freeze_batchnorm(unet)

    optimizer = torch.optim.Adam(
        [p for p in unet.parameters() if p.requires_grad],
        lr=cfg.lr_max,
        weight_decay=cfg.weight_decay,
    )
    scheduler = LambdaLR(optimizer, lr_lambda=lambda s: cosine_annealing_lr(s, cfg) / cfg.lr_max)

    if eval_dataset is None or eval_dataset.n_labeled == 0:
        logger.warning("No labeled evaluation split; curve is measured on the training subset")
        eval_dataset = SemiSupervisedDataset(slices=tuple(dataset[i] for i in subset_indices))
    eval_images, eval_masks = _eval_tensors(eval_dataset, augment.output_size)

    stream = LabeledBatchStream(dataset, subset_indices, cfg.total_steps * cfg.batch_size, augment, seed)
    loader = DataLoader(stream, batch_size=cfg.batch_size, shuffle=False, num_workers=cfg.num_workers)

    logger.info(
        "Starting fine-tuning",
        extra={
            "subset_size": len(subset_indices),
            "total_steps": cfg.total_steps,
            "anneal_period_steps": cfg.anneal_period_steps,
            "encoder_init": cfg.encoder_init.value,
            "seed": seed,
        },
    )

    curve = LearningCurve()
    running: List[float] = []
    for step, (images, masks) in enumerate(loader, start=1):
        logits = unet(match_input_channels(images, encoder_cfg.in_channels))
        loss = jaccard_loss(torch.softmax(logits, dim=1), masks, cfg.jaccard_eps)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"Non-finite segmentation loss at step {step}",
                snapshot={"step": step, "learning_rate": scheduler.get_last_lr()[0]},
            )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        scheduler.step()
        running.append(float(loss.detach()))

        if step % cfg.eval_every_steps == 0 or step == cfg.total_steps:
            train_loss = float(np.mean(running))
            running = []
            eval_loss, eval_iou = evaluate(
                unet, eval_images, eval_masks, n_classes, encoder_cfg.in_channels, cfg.jaccard_eps
            )
            if cfg.freeze_batchnorm:
                _freeze_batchnorm(unet)
            curve.append(step, train_loss, eval_iou, eval_loss)
            for name, value, split in (
                ("train_loss", train_loss, "train"),
                ("eval_loss", eval_loss, "eval"),
                ("eval_iou", eval_iou, "eval"),
            ):
                sink.append({"step": step, "split": split, "metric_name": name, "value": value})
            logger.info(
                "Fine-tuning evaluation",
                extra={"step": step, "train_loss": train_loss, "eval_iou": eval_iou},
            )

    test_loss = test_iou = None
    if test_dataset is not None and test_dataset.n_labeled > 0:
        test_images, test_masks = _eval_tensors(test_dataset, augment.output_size)
        test_loss, test_iou = evaluate(
            unet, test_images, test_masks, n_classes, encoder_cfg.in_channels, cfg.jaccard_eps
        )
        sink.append({"step": cfg.total_steps, "split": "test", "metric_name": "loss", "value": test_loss})
        sink.append({"step": cfg.total_steps, "split": "test", "metric_name": "iou", "value": test_iou})

    weights = snapshot_unet(unet, encoder, cfg.decoder, stage="finetune", step=cfg.total_steps, seed=seed)
    return FinetuneResult(curve=curve, weights=weights, test_loss=test_loss, test_iou=test_iou)
