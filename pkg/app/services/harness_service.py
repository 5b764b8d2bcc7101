"""
Experiment harness: the data-efficiency sweep and the domain-pretraining
epoch ablation.

Sweep cells are independent: each derives its subset and its fine-tuning
seed from its own keys and persists one record file, so the sweep can run
in parallel processes and resume after interruption.
"""

import hashlib
import json
import math
import multiprocessing
import shutil
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch

from app.core.exceptions import ArgumentError
from app.core.logging import get_logger
from app.core.seeding import derive_seed
from app.models.dataset import SemiSupervisedDataset, SplitTag, SubsetSpec, fraction_count
from app.models.records import LearningCurve, RunRecord, RunStatus
from app.models.schemas import (
    AblationConfig,
    AugmentConfig,
    ByolConfig,
    EncoderConfig,
    PipelineSpec,
    SegConfig,
    SweepSpec,
)
from app.models.weights import NetworkWeights
from app.repositories.checkpoint_repository import load_checkpoint, save_checkpoint
from app.repositories.record_repository import FileRunRecordRepository, atomic_write_text
from app.services.analysis_service import convergence_steps, curve_auc
from app.services.byol_service import pretrain
from app.services.data_service import sample_labeled_subset
from app.services.pipeline_service import PipelineRunner, check_pipeline
from app.services.segmentation_service import finetune

logger = get_logger(__name__)

ENCODER_CACHE_DIR = "_encoders"


def resolve_subset_sizes(
    fractions: Sequence[float],
    n_labeled: int,
    sizes: Optional[Sequence[int]] = None,
) -> List[int]:
    """
    Subset-size grid as sorted distinct counts.

    Explicit ``sizes`` win; otherwise the grid is the single-sample point plus
    ``ceil(f * n_labeled)`` for each fraction.

    Raises:
        ArgumentError: If a size exceeds the labeled pool.
    """
    if n_labeled < 1:
        raise ArgumentError("The training split has no labeled slices")
    if sizes is not None:
        grid = sorted(set(int(s) for s in sizes))
    else:
        grid = sorted({1} | {max(1, fraction_count(f, n_labeled)) for f in fractions})
    if grid[-1] > n_labeled:
        raise ArgumentError(f"Subset size {grid[-1]} exceeds the {n_labeled} labeled slices")
    return grid


def subset_seed(sweep_seed: int, seed: int) -> int:
    """Seed of the labeled subset used by every cell of seed ``seed``."""
    return derive_seed(sweep_seed, "subset", seed)


def cell_seed(sweep_seed: int, pipeline: str, subset_size: int, seed: int) -> int:
    """Fine-tuning seed of one sweep cell."""
    return derive_seed(sweep_seed, pipeline, subset_size, seed)


def pipeline_seed(sweep_seed: int, pipeline: str) -> int:
    return derive_seed(sweep_seed, pipeline, "pretrain")


def config_digest(**parts) -> str:
    """Short sha256 over JSON-serialisable parts; pydantic models are dumped first."""
    normalized = {
        name: value.model_dump(mode="json") if hasattr(value, "model_dump") else value
        for name, value in parts.items()
    }
    payload = json.dumps(normalized, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# ----- Sweep -----


@dataclass(frozen=True)
class SweepPlan:
    """Resolved grid of a sweep."""

    name: str
    subset_sizes: List[int]
    seeds: List[int]
    pipelines: List[str]
    total_steps: int
    eval_every_steps: int
    n_labeled: int

    @property
    def n_cells(self) -> int:
        return len(self.subset_sizes) * len(self.seeds) * len(self.pipelines)

    def cells(self) -> List[tuple]:
        return [
            (pipeline, size, seed)
            for pipeline in self.pipelines
            for size in self.subset_sizes
            for seed in self.seeds
        ]

    def describe(self) -> str:
        return (
            f"{len(self.subset_sizes)} sizes × {len(self.seeds)} seeds × "
            f"{len(self.pipelines)} pipelines = {self.n_cells} cells"
        )


@dataclass
class CellTask:
    """Everything one worker needs to run and persist a sweep cell."""

    pipeline: str
    subset_size: int
    seed: int
    sweep_seed: int
    encoder: NetworkWeights
    train: SemiSupervisedDataset
    val: Optional[SemiSupervisedDataset]
    test: Optional[SemiSupervisedDataset]
    seg: SegConfig
    augment: AugmentConfig
    encoder_cfg: EncoderConfig
    root: Path


def run_cell(task: CellTask) -> RunRecord:
    """
    Fine-tune one cell and save its record; failures are recorded as FAILED.
    """
    started = time.perf_counter()
    spec = SubsetSpec(count=task.subset_size, seed=subset_seed(task.sweep_seed, task.seed))
    indices: List[int] = []
    try:
        indices = sample_labeled_subset(task.train, spec)
        result = finetune(
            task.encoder,
            indices,
            task.train,
            task.seg,
            task.augment,
            task.encoder_cfg,
            seed=cell_seed(task.sweep_seed, task.pipeline, task.subset_size, task.seed),
            eval_dataset=task.val,
            test_dataset=task.test,
        )
        record = RunRecord(
            pipeline=task.pipeline,
            subset_size=task.subset_size,
            seed=task.seed,
            curve=result.curve,
            test_loss=result.test_loss,
            test_iou=result.test_iou,
            wall_clock_seconds=time.perf_counter() - started,
            status=RunStatus.DONE,
            subset_indices=indices,
            weights_digest=result.weights.digest(),
        )
    except Exception as e:
        logger.error(
            f"Sweep cell failed: {e}",
            extra={"pipeline": task.pipeline, "subset_size": task.subset_size, "seed": task.seed},
        )
        record = RunRecord(
            pipeline=task.pipeline,
            subset_size=task.subset_size,
            seed=task.seed,
            curve=LearningCurve(),
            test_loss=None,
            test_iou=None,
            wall_clock_seconds=time.perf_counter() - started,
            status=RunStatus.FAILED,
            error=f"{type(e).__name__}: {e}\n{traceback.format_exc(limit=5)}",
            subset_indices=indices,
        )
    FileRunRecordRepository(task.root).save(record)
    return record


def _init_worker() -> None:
    torch.set_num_threads(1)


class DataEfficiencyHarness:
    """
    Runs a data-efficiency sweep into ``<output_dir>/sweeps/<name>/``.

    Encoders are pretrained once per pipeline (seeded from the sweep seed)
    and cached under ``_encoders/`` so resumed sweeps skip pretraining.
    """

    def __init__(
        self,
        spec: SweepSpec,
        seg: SegConfig,
        augment: AugmentConfig,
        encoder_cfg: EncoderConfig,
        output_dir: Path,
        jobs: int = 1,
        environment: Optional[Dict] = None,
    ):
        self.spec = spec
        self.seg = seg
        self.augment = augment
        self.encoder_cfg = encoder_cfg.model_copy(update={"in_channels": 1})
        self.root = Path(output_dir) / "sweeps" / spec.name
        self.jobs = max(1, jobs)
        self.environment = environment

    @property
    def repository(self) -> FileRunRecordRepository:
        return FileRunRecordRepository(self.root)

    def plan(self, train: SemiSupervisedDataset) -> SweepPlan:
        sizes = resolve_subset_sizes(self.spec.subset_fractions, train.n_labeled, self.spec.subset_sizes)
        seg = self.seg.resolve(train.n_labeled)
        return SweepPlan(
            name=self.spec.name,
            subset_sizes=sizes,
            seeds=list(self.spec.seeds),
            pipelines=[p.kind.value for p in self.spec.pipelines],
            total_steps=seg.total_steps,
            eval_every_steps=seg.eval_every_steps,
            n_labeled=train.n_labeled,
        )

    def encoder_cache_path(self, pipeline: PipelineSpec, train: SemiSupervisedDataset) -> Path:
        """
        Cache file of a pipeline encoder, keyed by everything that shapes it:
        the pipeline spec, encoder and augmentation configs, the pretraining
        seed and the unlabeled pool.
        """
        key = config_digest(
            pipeline=pipeline,
            encoder=self.encoder_cfg,
            augment=self.augment,
            seed=pipeline_seed(self.spec.sweep_seed, pipeline.kind.value),
            pool=[len(train), train.patient_ids],
        )
        return self.root / ENCODER_CACHE_DIR / f"{pipeline.kind.value}-{key}.pt"

    def _encoder_for(
        self, pipeline: PipelineSpec, train: SemiSupervisedDataset, force: bool = False
    ) -> NetworkWeights:
        cache = self.encoder_cache_path(pipeline, train)
        if cache.is_file() and not force:
            logger.info(
                "Reusing cached pipeline encoder",
                extra={"pipeline": pipeline.kind.value, "cache": cache.name},
            )
            return load_checkpoint(cache)
        runner = PipelineRunner(
            self.encoder_cfg,
            self.augment,
            output_dir=self.root / ENCODER_CACHE_DIR / "runs",
            environment=self.environment,
        )
        result = runner.run(pipeline, train, pipeline_seed(self.spec.sweep_seed, pipeline.kind.value))
        save_checkpoint(result.encoder, cache)
        return result.encoder

    def run(
        self,
        splits: Mapping[SplitTag, SemiSupervisedDataset],
        force: bool = False,
    ) -> List[RunRecord]:
        """
        Execute every pending cell of the grid.

        DONE cells are skipped unless ``force``; FAILED cells are retried.

        Returns:
            The records of every grid cell, ordered by key.
        """
        for pipeline in self.spec.pipelines:
            check_pipeline(pipeline)
        train = splits[SplitTag.TRAIN]
        plan = self.plan(train)
        seg = self.seg.resolve(train.n_labeled)
        repository = self.repository

        pending = []
        for key in plan.cells():
            if not force and repository.exists(key) and repository.get(key).status == RunStatus.DONE:
                continue
            pending.append(key)
        logger.info(
            "Starting data-efficiency sweep",
            extra={"sweep": plan.name, "grid": plan.describe(), "pending": len(pending), "jobs": self.jobs},
        )

        encoders: Dict[str, NetworkWeights] = {}
        for pipeline in self.spec.pipelines:
            if any(key[0] == pipeline.kind.value for key in pending):
                encoders[pipeline.kind.value] = self._encoder_for(pipeline, train, force=force)

        tasks = [
            CellTask(
                pipeline=kind,
                subset_size=size,
                seed=seed,
                sweep_seed=self.spec.sweep_seed,
                encoder=encoders[kind],
                train=train,
                val=splits.get(SplitTag.VAL),
                test=splits.get(SplitTag.TEST),
                seg=seg,
                augment=self.augment,
                encoder_cfg=self.encoder_cfg,
                root=self.root,
            )
            for kind, size, seed in pending
        ]

        if self.jobs == 1 or len(tasks) <= 1:
            for task in tasks:
                run_cell(task)
        else:
            context = multiprocessing.get_context("spawn")
            with ProcessPoolExecutor(max_workers=self.jobs, mp_context=context, initializer=_init_worker) as pool:
                futures = [pool.submit(run_cell, task) for task in tasks]
                for future in as_completed(futures):
                    record = future.result()
                    logger.info(
                        "Sweep cell finished",
                        extra={"key": record.key, "status": record.status.value},
                    )

        wanted = set(plan.cells())
        return [r for r in repository.list_records() if r.key in wanted]


def data_efficiency_sweep(
    spec: SweepSpec,
    splits: Mapping[SplitTag, SemiSupervisedDataset],
    output_dir: Path,
    seg: SegConfig,
    augment: AugmentConfig,
    encoder_cfg: EncoderConfig,
    jobs: int = 1,
    force: bool = False,
) -> List[RunRecord]:
    """Run (or resume) a data-efficiency sweep; see ``DataEfficiencyHarness``."""
    harness = DataEfficiencyHarness(spec, seg, augment, encoder_cfg, output_dir, jobs)
    return harness.run(splits, force=force)


# ----- Epoch ablation -----


@dataclass
class AblationResult:
    """
    Fine-tuning curves per pretraining epoch and seed.

    Attributes:
        curves: ``curves[epoch][seed]``; epoch 0 is the base encoder.
        summary: One row per epoch with mean convergence step and curve AUC.
    """

    curves: Dict[int, Dict[int, LearningCurve]] = field(default_factory=dict)
    summary: List[Dict[str, float]] = field(default_factory=list)

    @property
    def n_curves(self) -> int:
        return sum(len(per_seed) for per_seed in self.curves.values())


def summarize_ablation(curves: Mapping[int, Mapping[int, LearningCurve]]) -> List[Dict[str, float]]:
    rows = []
    for epoch in sorted(curves):
        estimates = [convergence_steps(c) for c in curves[epoch].values() if len(c)]
        aucs = [curve_auc(c) for c in curves[epoch].values() if len(c) >= 2]
        rows.append({
            "epoch": epoch,
            "mean_convergence_step": float(np.mean([e.step for e in estimates])) if estimates else math.nan,
            "converged_runs": sum(e.converged for e in estimates),
            "mean_auc": float(np.mean(aucs)) if aucs else math.nan,
        })
    return rows


def _read_cached_curve(path: Path, key: str) -> Optional[LearningCurve]:
    """Curve stored at ``path`` if it was produced under ``key``."""
    if not path.is_file():
        return None
    data = json.loads(path.read_text(encoding="utf-8"))
    if data.get("config_digest") != key:
        logger.info("Recomputing ablation curve from a different configuration", extra={"path": str(path)})
        return None
    return LearningCurve.from_dict(data)


def _prune_stale_curves(root: Path, n_epochs: int, seeds: Sequence[int]) -> None:
    """Remove curve directories outside the current epoch and seed grid."""
    wanted_seeds = {f"seed-{seed}" for seed in seeds}
    for epoch_dir in root.glob("epoch-*"):
        if not epoch_dir.is_dir():
            continue
        if int(epoch_dir.name.split("-")[1]) >= n_epochs:
            shutil.rmtree(epoch_dir)
            continue
        for seed_dir in epoch_dir.glob("seed-*"):
            if seed_dir.name not in wanted_seeds:
                shutil.rmtree(seed_dir)


def pretrain_epoch_ablation(
    base_encoder: NetworkWeights,
    domain_dataset: SemiSupervisedDataset,
    ssl_cfg: ByolConfig,
    seg_cfg: SegConfig,
    seeds: Sequence[int],
    finetune_split: SemiSupervisedDataset,
    augment: AugmentConfig,
    encoder_cfg: EncoderConfig,
    subset_size: Optional[int] = None,
    eval_dataset: Optional[SemiSupervisedDataset] = None,
    output_dir: Optional[Path] = None,
    pretrain_seed: int = 0,
    force: bool = False,
) -> AblationResult:
    """
    Domain pretraining with a checkpoint after every epoch, then fine-tuning
    from each checkpoint (and from ``base_encoder`` as epoch 0) per seed.

    Curves under ``output_dir`` are reused only when their stored config
    digest (encoder weights, fine-tuning and augmentation configs, subset
    size, seed and data pools) matches and ``force`` is off. Curve
    directories outside the current epoch and seed grid are removed.

    Epoch-0 fine-tuning uses exactly the inputs of a direct fine-tune from
    ``base_encoder``: the same subset and the seed itself.

    Raises:
        ArgumentError: If ``ssl_cfg.checkpoint_every_epoch`` is off.
    """
    if not ssl_cfg.checkpoint_every_epoch:
        raise ArgumentError("The epoch ablation needs checkpoint_every_epoch = true")
    encoder_cfg = encoder_cfg.model_copy(update={"in_channels": 1})
    root = Path(output_dir) if output_dir is not None else None

    outcome = pretrain(
        domain_dataset,
        ssl_cfg,
        augment,
        seed=pretrain_seed,
        init_encoder=base_encoder,
        checkpoint_dir=root / "encoders" if root is not None else None,
        stage="byol_domain",
    )
    encoders = [base_encoder] + outcome.checkpoints
    size = subset_size or finetune_split.n_labeled

    result = AblationResult()
    for epoch, encoder in enumerate(encoders):
        result.curves[epoch] = {}
        encoder_digest = encoder.digest()
        for seed in seeds:
            key = config_digest(
                encoder=encoder_digest,
                seg=seg_cfg,
                augment=augment,
                encoder_cfg=encoder_cfg,
                subset_size=size,
                seed=seed,
                finetune_pool=[len(finetune_split), finetune_split.patient_ids],
                eval_pool=eval_dataset.patient_ids if eval_dataset is not None else None,
            )
            curve_path = root / f"epoch-{epoch:03d}" / f"seed-{seed}" / "curve.json" if root else None
            cached = _read_cached_curve(curve_path, key) if curve_path is not None and not force else None
            if cached is not None:
                curve = cached
            else:
                indices = sample_labeled_subset(finetune_split, SubsetSpec(count=size, seed=seed))
                curve = finetune(
                    encoder,
                    indices,
                    finetune_split,
                    seg_cfg,
                    augment,
                    encoder_cfg,
                    seed=seed,
                    eval_dataset=eval_dataset,
                ).curve
                if curve_path is not None:
                    payload = {**curve.to_dict(), "config_digest": key}
                    atomic_write_text(curve_path, json.dumps(payload, indent=2))
            result.curves[epoch][seed] = curve
        logger.info("Ablation epoch complete", extra={"epoch": epoch, "seeds": len(seeds)})

    if root is not None:
        _prune_stale_curves(root, len(encoders), seeds)

    result.summary = summarize_ablation(result.curves)
    if root is not None:
        atomic_write_text(root / "summary.json", json.dumps(result.summary, indent=2))
    return result


def ablation_from_config(
    ablation: AblationConfig,
    byol: ByolConfig,
    splits: Mapping[SplitTag, SemiSupervisedDataset],
    seg: SegConfig,
    augment: AugmentConfig,
    encoder_cfg: EncoderConfig,
    output_dir: Path,
    seed: int,
    force: bool = False,
) -> AblationResult:
    """Build the base encoder from ``ablation.base`` and run the ablation."""
    train = splits[SplitTag.TRAIN]
    root = Path(output_dir) / "ablations" / ablation.name
    runner = PipelineRunner(encoder_cfg, augment, output_dir=root / "base")
    base = runner.run(ablation.base, train, seed).encoder
    ssl_cfg = byol.model_copy(update={"epochs": ablation.epochs, "checkpoint_every_epoch": True})
    return pretrain_epoch_ablation(
        base,
        train,
        ssl_cfg,
        seg,
        ablation.seeds,
        finetune_split=train,
        augment=augment,
        encoder_cfg=encoder_cfg,
        subset_size=ablation.subset_size,
        eval_dataset=splits.get(SplitTag.VAL),
        output_dir=root,
        pretrain_seed=seed,
        force=force,
    )


def load_ablation_curves(root: Path) -> Dict[int, Dict[int, LearningCurve]]:
    """Curves written by ``pretrain_epoch_ablation`` under ``root``."""
    curves: Dict[int, Dict[int, LearningCurve]] = {}
    for path in sorted(Path(root).glob("epoch-*/seed-*/curve.json")):
        epoch = int(path.parent.parent.name.split("-")[1])
        seed = int(path.parent.name.split("-", 1)[1])
        curves.setdefault(epoch, {})[seed] = LearningCurve.from_dict(json.loads(path.read_text(encoding="utf-8")))
    return curves
