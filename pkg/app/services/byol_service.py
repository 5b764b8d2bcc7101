"""
BYOL self-supervised pretraining.

The online branch (encoder, projector, predictor) is trained by momentum SGD
on a symmetrized normalized-MSE objective; the target branch (encoder,
projector) follows it by an exponential moving average applied after every
optimizer step.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader, Dataset

from app.core.exceptions import ArgumentError, ContractError, NumericGuardError, TrainingDivergedError
from app.core.logging import get_logger
from app.core.seeding import numpy_generator, torch_generator
from app.models.dataset import SemiSupervisedDataset
from app.models.networks import ENCODER_PREFIX, PREDICTOR_PREFIX, ByolOnline, ByolTarget
from app.models.schemas import AugmentConfig, ByolConfig, EncoderConfig, TauSchedule
from app.models.weights import NetworkWeights
from app.repositories.base import MetricsSinkBase, NullMetricsSink
from app.repositories.checkpoint_repository import save_checkpoint
from app.services.augment_service import make_view_pair, resize_for_eval
from app.services.network_service import (
    build_encoder,
    create_byol_branches,
    encoder_config_from_weights,
    match_input_channels,
)

logger = get_logger(__name__)

COLLAPSE_PROBE_SIZE = 64


# ----- Objective and target update -----


def _check_norms(name: str, batch: torch.Tensor) -> torch.Tensor:
    norms = batch.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise NumericGuardError(f"byol_loss input '{name}' has a zero-norm row")
    return batch / norms


def byol_loss(
    q1: torch.Tensor,
    z2: torch.Tensor,
    q2: torch.Tensor,
    z1: torch.Tensor,
) -> torch.Tensor:
    """
    Symmetrized normalized MSE between predictions and target projections.

    ``loss = mean_b(|q1^ - z2^|^2 + |q2^ - z1^|^2)`` with ``x^ = x / |x|``,
    i.e. the batch mean of ``(2 - 2 cos(q1, z2)) + (2 - 2 cos(q2, z1))``.
    Target projections are detached.

    Raises:
        ArgumentError: If the four batches differ in shape.
        NumericGuardError: If any row has zero norm.
    """
    shapes = {tuple(t.shape) for t in (q1, z2, q2, z1)}
    if len(shapes) != 1:
        raise ArgumentError(f"byol_loss inputs must share one shape, got {sorted(shapes)}")

    q1n = _check_norms("q1", q1)
    q2n = _check_norms("q2", q2)
    z1n = _check_norms("z1", z1.detach())
    z2n = _check_norms("z2", z2.detach())

    per_sample = ((q1n - z2n) ** 2).sum(dim=-1) + ((q2n - z1n) ** 2).sum(dim=-1)
    return per_sample.mean()


def ema_update(online: NetworkWeights, target: NetworkWeights, tau: float) -> NetworkWeights:
    """
    ``xi' = tau * xi + (1 - tau) * theta`` for every entry shared with the
    target. Integer buffers (batch counters) are copied from the online side.

    Raises:
        ArgumentError: If tau lies outside [0, 1].
        ContractError: If the target names differ from the online names
            without the predictor.
    """
    if not 0.0 <= tau <= 1.0:
        raise ArgumentError(f"tau must lie in [0, 1], got {tau}")

    shared = [n for n in online.params if not n.startswith(PREDICTOR_PREFIX)]
    if set(shared) != set(target.params):
        missing = sorted(set(shared) - set(target.params))[:10]
        unexpected = sorted(set(target.params) - set(shared))[:10]
        raise ContractError(
            f"Online/target name sets differ: missing={missing} unexpected={unexpected}"
        )

    params = OrderedDict()
    for name, xi in target.params.items():
        theta = online.params[name]
        if xi.shape != theta.shape:
            raise ContractError(f"Shape mismatch for '{name}': {tuple(xi.shape)} vs {tuple(theta.shape)}")
        if xi.is_floating_point():
            params[name] = tau * xi + (1.0 - tau) * theta
        else:
            params[name] = theta.clone()
    return NetworkWeights(params=params, meta=dict(target.meta))


def tau_at(step: int, total_steps: int, cfg: ByolConfig) -> float:
    """
    EMA momentum at ``step``.

    COSINE_TO_ONE: ``1 - (1 - tau_base) * (cos(pi * t / T) + 1) / 2``.

    Raises:
        ArgumentError: If step lies outside [0, total_steps].
    """
    if not 0 <= step <= max(total_steps, 0):
        raise ArgumentError(f"step {step} outside [0, {total_steps}]")
    if cfg.tau_schedule == TauSchedule.CONSTANT or total_steps == 0:
        return cfg.tau_base
    progress = math.cos(math.pi * step / total_steps)
    return 1.0 - (1.0 - cfg.tau_base) * (progress + 1.0) / 2.0


def cosine_decay(step: int, total_steps: int) -> float:
    """Learning-rate multiplier decaying from 1 to 0 over ``total_steps``."""
    if total_steps <= 0:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


# ----- Training state -----


@dataclass
class ByolState:
    """
    Mutable training state.

    Attributes:
        online: Encoder, projector and predictor (gradient-trained).
        target: Encoder and projector (EMA-updated, no gradients).
        optimizer: Momentum SGD over the online parameters.
        scheduler: Cosine learning-rate decay.
        total_steps: Step count the schedules are defined over.
        step: Optimizer steps taken so far.
        meta: Encoder meta carried into snapshots.
    """

    online: ByolOnline
    target: ByolTarget
    optimizer: torch.optim.Optimizer
    scheduler: LambdaLR
    total_steps: int
    step: int = 0
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def learning_rate(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    def online_weights(self) -> NetworkWeights:
        return NetworkWeights.from_module(self.online, "", self.meta)

    def target_weights(self) -> NetworkWeights:
        return NetworkWeights.from_module(self.target, "", self.meta)

    def encoder_weights(self, **meta_updates: Any) -> NetworkWeights:
        meta = dict(self.meta)
        meta.update(meta_updates)
        return NetworkWeights.from_module(self.online.encoder, ENCODER_PREFIX, meta)


def create_byol_state(
    encoder: NetworkWeights,
    cfg: ByolConfig,
    total_steps: int,
    generator: torch.Generator,
) -> ByolState:
    """Build both branches around ``encoder`` with fresh heads."""
    online, target = create_byol_branches(encoder, cfg.head, generator)
    optimizer = torch.optim.SGD(
        online.parameters(),
        lr=cfg.learning_rate,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    scheduler = LambdaLR(optimizer, lr_lambda=lambda s: cosine_decay(s, total_steps))
    return ByolState(
        online=online,
        target=target,
        optimizer=optimizer,
        scheduler=scheduler,
        total_steps=total_steps,
        meta=dict(encoder.meta),
    )


def byol_train_step(
    state: ByolState,
    view1: torch.Tensor,
    view2: torch.Tensor,
    cfg: ByolConfig,
) -> Tuple[ByolState, float]:
    """
    One optimizer step on the online branch followed by the EMA target update.

    Args:
        state: Training state, updated in place and returned.
        view1: B x C x S x S first views.
        view2: B x C x S x S second views of the same slices.
        cfg: Pretraining configuration.

    Returns:
        The updated state and the step's loss.

    Raises:
        ArgumentError: If the batch holds fewer than 2 samples.
        TrainingDivergedError: If the loss is not finite.
    """
    if view1.shape[0] < 2 or view1.shape != view2.shape:
        raise ArgumentError(f"BYOL batches need >= 2 paired samples, got {tuple(view1.shape)}")

    tau = tau_at(min(state.step, state.total_steps), state.total_steps, cfg)
    target_before = state.target_weights()
    learning_rate = state.learning_rate

    state.online.train()
    state.target.train()
    z1, q1 = state.online(view1)
    z2, q2 = state.online(view2)
    with torch.no_grad():
        t1 = state.target(view1)
        t2 = state.target(view2)
    loss = byol_loss(q1, t2, q2, t1)

    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"Non-finite BYOL loss at step {state.step}",
            snapshot={
                "step": state.step,
                "loss": float(loss.detach()),
                "tau": tau,
                "learning_rate": learning_rate,
                "online_finite": state.online_weights().is_finite(),
            },
        )

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.scheduler.step()

    updated = ema_update(state.online_weights(), target_before, tau)
    state.target.load_state_dict(updated.state_dict_for(""), strict=True)
    state.step += 1

    logger.debug(
        "BYOL step",
        extra={"step": state.step, "loss": float(loss.detach()), "tau": tau, "lr": learning_rate},
    )
    return state, float(loss.detach())


# ----- Data -----


class ViewPairDataset(Dataset):
    """
    Augmented view pairs over a slice collection.

    The generator of sample ``i`` in epoch ``e`` derives from
    ``(seed, "views", e, i)``, so worker count never changes the batches.
    """

    def __init__(self, images: Sequence[np.ndarray], augment: AugmentConfig, seed: int):
        self.images = images
        self.augment = augment
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        rng = numpy_generator(self.seed, "views", self.epoch, index)
        pair = make_view_pair(self.images[index], self.augment, rng)
        return torch.from_numpy(pair.view1)[None], torch.from_numpy(pair.view2)[None]


@torch.no_grad()
def embedding_std(encoder: torch.nn.Module, images: torch.Tensor) -> float:
    """
    Mean over features of the batch standard deviation of L2-normalized
    embeddings; values near zero indicate representational collapse.
    """
    was_training = encoder.training
    encoder.eval()
    embeddings, _ = encoder(images)
    encoder.train(was_training)
    normalized = F.normalize(embeddings, dim=-1)
    return float(normalized.std(dim=0).mean())


def _probe_batch(dataset: SemiSupervisedDataset, size: int, in_channels: int) -> torch.Tensor:
    step = max(1, len(dataset) // COLLAPSE_PROBE_SIZE)
    images = [
        resize_for_eval(dataset[i].image, np.zeros_like(dataset[i].image, dtype=np.uint8), size)[0]
        for i in range(0, len(dataset), step)
    ][:COLLAPSE_PROBE_SIZE]
    batch = torch.from_numpy(np.stack(images))[:, None]
    return match_input_channels(batch, in_channels)


# ----- Pretraining loop -----


@dataclass
class PretrainResult:
    """Final encoder, optional per-epoch encoder checkpoints and loss history."""

    encoder: NetworkWeights
    checkpoints: List[NetworkWeights]
    history: List[Dict[str, float]]


def pretrain(
    dataset: SemiSupervisedDataset,
    cfg: ByolConfig,
    augment: AugmentConfig,
    seed: int,
    init_encoder: Optional[NetworkWeights] = None,
    encoder_cfg: Optional[EncoderConfig] = None,
    metrics_sink: Optional[MetricsSinkBase] = None,
    checkpoint_dir: Optional[Path] = None,
    stage: str = "byol",
) -> PretrainResult:
    """
    BYOL pretraining on every slice of ``dataset``, labeled or not.

    Args:
        dataset: Slices to pretrain on (masks are ignored).
        cfg: Pretraining configuration.
        augment: Augmentation chain producing the views.
        seed: Root of the head-initialization, view and batch-order streams.
        init_encoder: Starting encoder; a fresh Kaiming encoder built from
            ``encoder_cfg`` when omitted.
        encoder_cfg: Encoder architecture used when ``init_encoder`` is None.
        metrics_sink: Receives one row per step.
        checkpoint_dir: When set, per-epoch checkpoints are also saved here.
        stage: Stage name recorded in snapshot meta.

    Returns:
        PretrainResult; with ``epochs == 0`` the initial encoder is returned
        untouched.

    Raises:
        ArgumentError: If the dataset holds fewer than 2 slices.
    """
    if len(dataset) == 0:
        raise ArgumentError("Cannot pretrain on an empty dataset")
    if init_encoder is None:
        init_encoder = build_encoder(encoder_cfg or EncoderConfig(), torch_generator(seed, "encoder"))
    if cfg.epochs == 0:
        return PretrainResult(encoder=init_encoder, checkpoints=[], history=[])
    if len(dataset) < 2:
        raise ArgumentError("BYOL pretraining needs at least 2 slices")

    sink = metrics_sink or NullMetricsSink()
    in_channels = encoder_config_from_weights(init_encoder).in_channels
    batch_size = min(cfg.batch_size, len(dataset))
    steps_per_epoch = len(dataset) // batch_size
    total_steps = cfg.epochs * steps_per_epoch

    state = create_byol_state(init_encoder, cfg, total_steps, torch_generator(seed, "heads"))
    views = ViewPairDataset([s.image for s in dataset.slices], augment, seed)
    probe = _probe_batch(dataset, augment.output_size, in_channels)

    logger.info(
        "Starting BYOL pretraining",
        extra={
            "slices": len(dataset),
            "epochs": cfg.epochs,
            "batch_size": batch_size,
            "total_steps": total_steps,
            "seed": seed,
        },
    )

    history: List[Dict[str, float]] = []
    checkpoints: List[NetworkWeights] = []
    for epoch in range(1, cfg.epochs + 1):
        views.set_epoch(epoch)
        loader = DataLoader(
            views,
            batch_size=batch_size,
            shuffle=True,
            drop_last=True,
            num_workers=cfg.num_workers,
            generator=torch_generator(seed, "order", epoch),
        )
        epoch_losses = []
        for view1, view2 in loader:
            tau = tau_at(state.step, total_steps, cfg)
            learning_rate = state.learning_rate
            state, loss = byol_train_step(
                state,
                match_input_channels(view1, in_channels),
                match_input_channels(view2, in_channels),
                cfg,
            )
            row = {
                "step": state.step,
                "epoch": epoch,
                "loss": loss,
                "tau": tau,
                "learning_rate": learning_rate,
            }
            history.append(row)
            sink.append(row)
            epoch_losses.append(loss)

        spread = embedding_std(state.online.encoder, probe)
        logger.info(
            "BYOL epoch complete",
            extra={"epoch": epoch, "mean_loss": float(np.mean(epoch_losses)), "embedding_std": spread},
        )
        if spread < 1e-2:
            logger.warning("Embeddings look collapsed", extra={"epoch": epoch, "embedding_std": spread})

        if cfg.checkpoint_every_epoch:
            snapshot = state.encoder_weights(stage=stage, epoch=epoch, seed=seed)
            checkpoints.append(snapshot)
            if checkpoint_dir is not None:
                save_checkpoint(snapshot, Path(checkpoint_dir) / f"epoch-{epoch:03d}.pt")

    encoder = state.encoder_weights(stage=stage, epoch=cfg.epochs, seed=seed)
    return PretrainResult(encoder=encoder, checkpoints=checkpoints, history=history)
