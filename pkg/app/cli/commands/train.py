"""
Training commands: pretrain, finetune and pipeline.

Each command writes its artifacts under ``<out>/<command>/...``; rerunning
with the same configuration overwrites them with identical content.
"""

import json
import math
from pathlib import Path
from typing import List

from app.cli.dependencies import CommandContext, get_splits, write_plan
from app.core.exceptions import ConfigurationError
from app.core.logging import get_logger
from app.models.dataset import SemiSupervisedDataset, SplitTag, SubsetSpec
from app.models.schemas import ByolConfig, EncoderInit, PipelineKind, PipelineSpec
from app.repositories.checkpoint_repository import load_checkpoint, save_checkpoint
from app.repositories.metrics_repository import JsonlMetricsSink
from app.repositories.record_repository import atomic_write_text
from app.services.byol_service import pretrain
from app.services.data_service import sample_labeled_subset
from app.services.network_service import count_parameters, describe_external_mapping
from app.services.pipeline_service import PipelineRunner, check_pipeline
from app.services.segmentation_service import finetune

logger = get_logger(__name__)

ENCODER_NAME = "encoder.pt"
UNET_NAME = "unet.pt"


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser("pretrain", parents=parents, help="BYOL pretraining on the training split")
    parser.set_defaults(handler=pretrain_command)

    parser = subparsers.add_parser("finetune", parents=parents, help="fine-tune a U-Net on a labeled subset")
    parser.add_argument("--encoder", type=Path, help="encoder checkpoint (overrides finetune.encoder_checkpoint)")
    parser.add_argument("--subset-size", type=int, help="labeled slices to train on (default: all)")
    parser.set_defaults(handler=finetune_command)

    parser = subparsers.add_parser("pipeline", parents=parents, help="run pretraining pipelines")
    parser.add_argument(
        "--kind",
        choices=[k.value for k in PipelineKind],
        help="run one pipeline (default: every configured pipeline)",
    )
    parser.set_defaults(handler=pipeline_command)


def _ssl_steps(cfg: ByolConfig, n_slices: int) -> str:
    batch = min(cfg.batch_size, max(n_slices, 1))
    per_epoch = n_slices // batch
    return f"{cfg.epochs} epochs × {per_epoch} steps = {cfg.epochs * per_epoch} steps (batch {batch})"


def pretrain_command(ctx: CommandContext) -> int:
    cfg = ctx.config
    train = get_splits(ctx)[SplitTag.TRAIN]
    root = ctx.output_dir / "pretrain" / cfg.name

    if ctx.dry_run:
        write_plan(ctx, "pretrain", [
            f"output: {root}",
            f"slices: {len(train)} (labels ignored)",
            f"stage byol: {_ssl_steps(cfg.byol, len(train))}",
            f"per-epoch checkpoints: {cfg.byol.checkpoint_every_epoch}",
        ])
        return 0

    with JsonlMetricsSink(root / "ssl_metrics.jsonl", truncate=True) as sink:
        outcome = pretrain(
            train,
            cfg.byol,
            cfg.augment,
            seed=cfg.seed,
            encoder_cfg=cfg.encoder.model_copy(update={"in_channels": 1}),
            metrics_sink=sink,
            checkpoint_dir=root / "epochs",
        )
    digest = save_checkpoint(outcome.encoder, root / ENCODER_NAME)
    final_loss = outcome.history[-1]["loss"] if outcome.history else None
    logger.info("Pretraining complete", extra={"output": str(root), "digest": digest[:12]})
    print(f"encoder: {root / ENCODER_NAME}")
    print(f"digest: {digest}")
    if final_loss is not None:
        print(f"final loss: {final_loss:.6f}")
    return 0


def finetune_command(ctx: CommandContext) -> int:
    cfg = ctx.config
    encoder_path = ctx.args.encoder or cfg.finetune.encoder_checkpoint
    if cfg.seg.encoder_init == EncoderInit.FROM_CHECKPOINT:
        if encoder_path is None:
            raise ConfigurationError(
                "finetune needs an encoder checkpoint: pass --encoder or set finetune.encoder_checkpoint"
            )
        if not Path(encoder_path).is_file():
            raise ConfigurationError(f"Encoder checkpoint not found: {encoder_path}")

    splits = get_splits(ctx)
    train = splits[SplitTag.TRAIN]
    size = ctx.args.subset_size or cfg.finetune.subset_size or train.n_labeled
    seg = cfg.seg.resolve(train.n_labeled)
    root = ctx.output_dir / "finetune" / cfg.name

    if ctx.dry_run:
        write_plan(ctx, "finetune", [
            f"output: {root}",
            f"encoder: {encoder_path if seg.encoder_init == EncoderInit.FROM_CHECKPOINT else 'random init'}",
            f"subset: {size} of {train.n_labeled} labeled slices (subset seed {cfg.finetune.subset_seed})",
            f"steps: {seg.total_steps} (batch {seg.batch_size}, restart period {seg.anneal_period_steps})",
            f"curve points: {math.ceil(seg.total_steps / seg.eval_every_steps)} (every {seg.eval_every_steps} steps)",
        ])
        return 0

    encoder = load_checkpoint(encoder_path) if seg.encoder_init == EncoderInit.FROM_CHECKPOINT else None
    indices = sample_labeled_subset(train, SubsetSpec(count=size, seed=cfg.finetune.subset_seed))
    with JsonlMetricsSink(root / "metrics.jsonl", truncate=True) as sink:
        result = finetune(
            encoder,
            indices,
            train,
            cfg.seg,
            cfg.augment,
            cfg.encoder.model_copy(update={"in_channels": 1}),
            seed=cfg.seed,
            eval_dataset=splits.get(SplitTag.VAL),
            test_dataset=splits.get(SplitTag.TEST),
            metrics_sink=sink,
        )

    atomic_write_text(root / "curve.json", json.dumps(result.curve.to_dict(), indent=2))
    digest = save_checkpoint(result.weights, root / UNET_NAME)
    summary = {
        "subset_size": size,
        "subset_indices": indices,
        "test_loss": result.test_loss,
        "test_iou": result.test_iou,
        "weights_digest": digest,
        "parameters": count_parameters(result.weights),
    }
    atomic_write_text(root / "result.json", json.dumps(summary, indent=2, sort_keys=True))

    last = result.curve.eval_iou[-1] if len(result.curve) else float("nan")
    print(f"curve: {len(result.curve)} points, final eval IoU {last:.4f}")
    if result.test_iou is not None:
        print(f"test: loss {result.test_loss:.4f} IoU {result.test_iou:.4f}")
    print(f"weights: {root / UNET_NAME}")
    return 0


def _selected_pipelines(ctx: CommandContext) -> List[PipelineSpec]:
    kind = ctx.args.kind
    if kind is None:
        return list(ctx.config.pipelines)
    configured = [p for p in ctx.config.pipelines if p.kind.value == kind]
    return configured or [PipelineSpec.default_for(PipelineKind(kind))]


def _describe_stages(spec: PipelineSpec, train: SemiSupervisedDataset) -> List[str]:
    stages = []
    if spec.kind.uses_imagenet:
        stages.append(f"import {spec.external_weights_path} + input-channel adaptation")
    elif not spec.kind.uses_domain_ssl:
        stages.append("random init (Kaiming uniform)")
    if spec.kind.uses_domain_ssl:
        stages.append(f"byol_domain: {_ssl_steps(spec.domain_ssl, len(train))}")
    return stages


def pipeline_command(ctx: CommandContext) -> int:
    cfg = ctx.config
    specs = _selected_pipelines(ctx)
    for spec in specs:
        check_pipeline(spec)
    train = get_splits(ctx)[SplitTag.TRAIN]
    root = ctx.output_dir / "pipelines"

    if ctx.dry_run:
        lines = [f"output: {root}", f"slices: {len(train)}"]
        for spec in specs:
            for n, stage in enumerate(_describe_stages(spec, train), start=1):
                lines.append(f"{spec.kind.value} stage {n}: {stage}")
        if any(spec.kind.uses_imagenet for spec in specs):
            lines += describe_external_mapping().splitlines()
        write_plan(ctx, "pipeline", lines)
        return 0

    runner = PipelineRunner(cfg.encoder, cfg.augment, output_dir=root, environment=ctx.environment())
    for spec in specs:
        result = runner.run(spec, train, cfg.seed)
        stages = " -> ".join(stage.name for stage in result.provenance.stages)
        print(f"{spec.kind.value}: {stages} [{result.encoder.digest()[:12]}]")
    return 0
