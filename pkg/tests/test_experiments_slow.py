"""
Desk-scale experiments on synthetic data. Run with ``pytest -m slow``.
"""

from pathlib import Path
from statistics import mean

import numpy as np
import pytest
import torch

from app.models.dataset import SplitTag, SubsetSpec
from app.models.records import RunStatus
from app.models.schemas import (
    AugmentConfig,
    ByolConfig,
    EncoderConfig,
    HeadConfig,
    PipelineKind,
    PipelineSpec,
    SegConfig,
    SweepSpec,
)
from app.repositories.record_repository import RECORD_FILENAME
from app.services import harness_service
from app.services.analysis_service import convergence_steps, curve_auc
from app.services.byol_service import embedding_std
from app.services.data_service import generate_synthetic_dataset, sample_labeled_subset, split_by_patient
from app.services.harness_service import DataEfficiencyHarness, pretrain_epoch_ablation, run_cell
from app.services.network_service import load_encoder_module
from app.services.pipeline_service import PipelineRunner
from app.services.segmentation_service import finetune

pytestmark = pytest.mark.slow

IMAGE_SIZE = 64


@pytest.fixture(scope="module")
def desk_splits():
    dataset = generate_synthetic_dataset(
        n_patients=10, frames_per_cycle=25, slices_per_frame=2, image_size=IMAGE_SIZE, seed=0
    )
    return split_by_patient(dataset, seed=0)


@pytest.fixture(autouse=True)
def _single_thread():
    """Worker processes run single-threaded; match them in the parent."""
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(previous)


@pytest.fixture
def desk_augment() -> AugmentConfig:
    return AugmentConfig(output_size=IMAGE_SIZE)


def _comparison_table(rows) -> str:
    lines = ["pipeline     seed  auc     convergence"]
    for pipeline, seed, auc, step in rows:
        lines.append(f"{pipeline:<12} {seed:<5} {auc:.4f}  {step}")
    return "\n".join(lines)


def test_domain_pretraining_beats_random_init(tmp_path: Path, desk_splits, desk_augment) -> None:
    train, val = desk_splits[SplitTag.TRAIN], desk_splits[SplitTag.VAL]
    encoder_cfg = EncoderConfig()
    runner = PipelineRunner(encoder_cfg, desk_augment, tmp_path / "pipelines", environment={})
    encoders = {
        PipelineKind.RANDOM_INIT: runner.run(PipelineSpec(kind=PipelineKind.RANDOM_INIT), train, seed=0).encoder,
        PipelineKind.BYOL_DOMAIN: runner.run(
            PipelineSpec(kind=PipelineKind.BYOL_DOMAIN, domain_ssl=ByolConfig(epochs=20)), train, seed=0
        ).encoder,
    }

    module = load_encoder_module(encoders[PipelineKind.BYOL_DOMAIN])
    batch = torch.from_numpy(np.stack([train[i].image for i in range(64)]))[:, None]
    assert embedding_std(module, batch) > 0.01

    seg = SegConfig(total_steps=300, eval_every_steps=25)
    rows = []
    for kind, encoder in encoders.items():
        for seed in range(5):
            indices = sample_labeled_subset(train, SubsetSpec(count=16, seed=seed))
            result = finetune(encoder, indices, train, seg, desk_augment, encoder_cfg, seed=seed, eval_dataset=val)
            rows.append((kind.value, seed, curve_auc(result.curve), convergence_steps(result.curve).step))

    def avg(kind: PipelineKind, column: int) -> float:
        return mean(row[column] for row in rows if row[0] == kind.value)

    table = _comparison_table(rows)
    assert avg(PipelineKind.BYOL_DOMAIN, 2) >= avg(PipelineKind.RANDOM_INIT, 2), table
    assert avg(PipelineKind.BYOL_DOMAIN, 3) <= avg(PipelineKind.RANDOM_INIT, 3), table


def test_five_epoch_ablation_yields_twelve_curves(tmp_path: Path, desk_splits, desk_augment) -> None:
    train, val = desk_splits[SplitTag.TRAIN], desk_splits[SplitTag.VAL]
    encoder_cfg = EncoderConfig()
    base = PipelineRunner(encoder_cfg, desk_augment, tmp_path / "pipelines", environment={}).run(
        PipelineSpec(kind=PipelineKind.RANDOM_INIT), train, seed=0
    ).encoder
    ssl = ByolConfig(epochs=5, checkpoint_every_epoch=True)
    seg = SegConfig(total_steps=100, eval_every_steps=25)

    result = pretrain_epoch_ablation(
        base, train, ssl, seg, [0, 1], train, desk_augment, encoder_cfg,
        subset_size=16, eval_dataset=val, output_dir=tmp_path / "ablation",
    )
    assert result.n_curves == 12
    assert sorted(result.curves) == list(range(6))
    assert all(sorted(by_seed) == [0, 1] for by_seed in result.curves.values())

    for seed in (0, 1):
        direct = finetune(
            base,
            sample_labeled_subset(train, SubsetSpec(count=16, seed=seed)),
            train, seg, desk_augment, encoder_cfg, seed=seed, eval_dataset=val,
        )
        assert result.curves[0][seed] == direct.curve


class _Interrupted(KeyboardInterrupt):
    pass


def test_sweep_survives_interruption_and_reproduces(tmp_path: Path, desk_splits, desk_augment, monkeypatch) -> None:
    spec = SweepSpec(
        name="integrity",
        subset_sizes=[1, 4, 16],
        seeds=[0, 1, 2],
        pipelines=[
            PipelineSpec(kind=PipelineKind.RANDOM_INIT),
            PipelineSpec(
                kind=PipelineKind.BYOL_DOMAIN,
                domain_ssl=ByolConfig(epochs=2, head=HeadConfig(projector=(64, 32), predictor=(64, 32))),
            ),
        ],
    )
    seg = SegConfig(total_steps=40, eval_every_steps=10)

    def harness(root: Path, jobs: int) -> DataEfficiencyHarness:
        return DataEfficiencyHarness(spec, seg, desk_augment, EncoderConfig(), root, jobs=jobs, environment={})

    finished = []

    def dies_after_five(task):
        if len(finished) == 5:
            raise _Interrupted()
        finished.append(task)
        return run_cell(task)

    monkeypatch.setattr(harness_service, "run_cell", dies_after_five)
    interrupted = harness(tmp_path / "first", jobs=1)
    with pytest.raises(_Interrupted):
        interrupted.run(desk_splits)
    monkeypatch.undo()

    assert len(interrupted.repository.list_records()) == 5
    stale = interrupted.root / "RANDOM_INIT" / f".{RECORD_FILENAME}.stale.tmp"
    stale.parent.mkdir(parents=True, exist_ok=True)
    stale.write_text("{", encoding="utf-8")

    resumed = interrupted.run(desk_splits)
    keys = [r.key for r in resumed]
    assert len(keys) == 18 and len(set(keys)) == 18
    assert all(r.status == RunStatus.DONE for r in resumed)
    assert len(list(interrupted.root.rglob(RECORD_FILENAME))) == 18

    fresh = harness(tmp_path / "second", jobs=2).run(desk_splits)
    assert [r.digest() for r in fresh] == [r.digest() for r in resumed]
