import json
from pathlib import Path

import pytest

from app.core.exceptions import ArgumentError
from app.models.dataset import SplitTag, SubsetSpec
from app.models.records import LearningCurve, RunRecord, RunStatus
from app.models.schemas import (
    DEFAULT_SUBSET_FRACTIONS,
    PipelineKind,
    PipelineSpec,
    SweepSpec,
)
from app.services import harness_service
from app.services.data_service import sample_labeled_subset
from app.services.harness_service import (
    ENCODER_CACHE_DIR,
    CellTask,
    DataEfficiencyHarness,
    SweepPlan,
    data_efficiency_sweep,
    load_ablation_curves,
    pretrain_epoch_ablation,
    resolve_subset_sizes,
    run_cell,
    subset_seed,
)
from app.services.segmentation_service import finetune


def test_default_grid_resolves_to_distinct_counts() -> None:
    sizes = resolve_subset_sizes(DEFAULT_SUBSET_FRACTIONS, 280)
    assert sizes == [1, 2, 3, 6, 14, 28, 70, 140, 280]
    spec = SweepSpec()
    plan = SweepPlan(
        name=spec.name,
        subset_sizes=sizes,
        seeds=spec.seeds,
        pipelines=[p.kind.value for p in spec.pipelines],
        total_steps=5250,
        eval_every_steps=50,
        n_labeled=280,
    )
    assert plan.n_cells == 540
    assert plan.describe() == "9 sizes × 10 seeds × 6 pipelines = 540 cells"
    assert len(set(plan.cells())) == 540


def test_subset_grid_guards() -> None:
    assert resolve_subset_sizes([0.5], 10, sizes=[5, 1, 5]) == [1, 5]
    assert resolve_subset_sizes([0.001], 10) == [1]
    assert resolve_subset_sizes([0.07], 100) == [1, 7]
    assert resolve_subset_sizes([0.07], 1400) == [1, 98]
    with pytest.raises(ArgumentError):
        resolve_subset_sizes([0.5], 10, sizes=[11])
    with pytest.raises(ArgumentError):
        resolve_subset_sizes([0.5], 0)


@pytest.fixture
def sweep_spec(byol_cfg) -> SweepSpec:
    return SweepSpec(
        name="tiny",
        subset_sizes=[1, 2],
        seeds=[0, 1],
        sweep_seed=3,
        pipelines=[
            PipelineSpec(kind=PipelineKind.RANDOM_INIT),
            PipelineSpec(kind=PipelineKind.BYOL_DOMAIN, domain_ssl=byol_cfg),
        ],
    )


@pytest.fixture
def harness(tmp_path: Path, sweep_spec, seg_cfg, augment_cfg, encoder_cfg) -> DataEfficiencyHarness:
    seg = seg_cfg.model_copy(update={"total_steps": 2})
    return DataEfficiencyHarness(sweep_spec, seg, augment_cfg, encoder_cfg, tmp_path, environment={})


@pytest.fixture
def counted_cells(monkeypatch):
    calls = []

    def counting(task):
        calls.append(task)
        return run_cell(task)

    monkeypatch.setattr(harness_service, "run_cell", counting)
    return calls


def test_sweep_runs_every_cell_and_resumes(tmp_path: Path, harness, tiny_splits, counted_cells) -> None:
    records = harness.run(tiny_splits)
    assert len(records) == 8 and len(counted_cells) == 8
    assert all(r.status == RunStatus.DONE for r in records)
    assert all(r.curve.steps == [2] for r in records)
    assert len(list((harness.root / ENCODER_CACHE_DIR).glob("BYOL_DOMAIN-*.pt"))) == 1

    by_key = {r.key: r for r in records}
    for size in (1, 2):
        for seed in (0, 1):
            a = by_key[("RANDOM_INIT", size, seed)].subset_indices
            b = by_key[("BYOL_DOMAIN", size, seed)].subset_indices
            assert a == b and len(a) == size

    counted_cells.clear()
    again = harness.run(tiny_splits)
    assert counted_cells == []
    assert [r.to_dict() for r in again] == [r.to_dict() for r in records]

    key = ("BYOL_DOMAIN", 2, 1)
    harness.repository.delete(key)
    rerun = {r.key: r for r in harness.run(tiny_splits)}
    assert len(counted_cells) == 1
    assert rerun[key].digest() == by_key[key].digest()

    counted_cells.clear()
    forced = harness.run(tiny_splits, force=True)
    assert len(counted_cells) == 8
    assert [r.digest() for r in forced] == [r.digest() for r in records]


def test_failed_cells_are_retried(harness, tiny_splits, counted_cells) -> None:
    failed = RunRecord(
        pipeline="RANDOM_INIT", subset_size=1, seed=0, curve=LearningCurve(), test_loss=None,
        test_iou=None, wall_clock_seconds=0.0, status=RunStatus.FAILED, error="boom",
    )
    harness.repository.save(failed)
    records = harness.run(tiny_splits)
    assert all(r.status == RunStatus.DONE for r in records)
    assert ("RANDOM_INIT", 1, 0) in {(t.pipeline, t.subset_size, t.seed) for t in counted_cells}


def test_cell_failure_is_recorded(tmp_path: Path, tiny_splits, tiny_encoder, seg_cfg, augment_cfg, encoder_cfg) -> None:
    task = CellTask(
        pipeline="RANDOM_INIT", subset_size=999, seed=0, sweep_seed=0, encoder=tiny_encoder,
        train=tiny_splits[SplitTag.TRAIN], val=None, test=None, seg=seg_cfg.resolve(8),
        augment=augment_cfg, encoder_cfg=encoder_cfg, root=tmp_path,
    )
    record = run_cell(task)
    assert record.status == RunStatus.FAILED
    assert "ArgumentError" in record.error
    assert len(record.curve) == 0
    stored = json.loads(next(tmp_path.rglob("*.json")).read_text(encoding="utf-8"))
    assert stored["status"] == "FAILED"


def test_subset_depends_only_on_sweep_seed_and_seed(tiny_splits) -> None:
    train = tiny_splits[SplitTag.TRAIN]
    first = sample_labeled_subset(train, SubsetSpec(count=3, seed=subset_seed(0, 1)))
    again = sample_labeled_subset(train, SubsetSpec(count=3, seed=subset_seed(0, 1)))
    assert first == again
    assert subset_seed(0, 1) != subset_seed(1, 1) != subset_seed(0, 2)


def test_epoch_ablation_starts_from_direct_finetuning(tmp_path: Path, tiny_splits, tiny_encoder, byol_cfg, seg_cfg, augment_cfg, encoder_cfg) -> None:
    train, val = tiny_splits[SplitTag.TRAIN], tiny_splits[SplitTag.VAL]
    ssl = byol_cfg.model_copy(update={"epochs": 2, "checkpoint_every_epoch": True})
    seg = seg_cfg.model_copy(update={"total_steps": 2})
    result = pretrain_epoch_ablation(
        tiny_encoder, train, ssl, seg, [0, 1], train, augment_cfg, encoder_cfg,
        subset_size=2, eval_dataset=val, output_dir=tmp_path,
    )
    assert sorted(result.curves) == [0, 1, 2]
    assert result.n_curves == 6
    assert [row["epoch"] for row in result.summary] == [0, 1, 2]
    assert (tmp_path / "encoders" / "epoch-002.pt").is_file()

    for seed in (0, 1):
        direct = finetune(
            tiny_encoder,
            sample_labeled_subset(train, SubsetSpec(count=2, seed=seed)),
            train, seg, augment_cfg, encoder_cfg, seed=seed, eval_dataset=val,
        )
        assert result.curves[0][seed] == direct.curve

    assert load_ablation_curves(tmp_path) == result.curves


def test_epoch_ablation_needs_epoch_checkpoints(tiny_splits, tiny_encoder, byol_cfg, seg_cfg, augment_cfg, encoder_cfg) -> None:
    train = tiny_splits[SplitTag.TRAIN]
    with pytest.raises(ArgumentError):
        pretrain_epoch_ablation(tiny_encoder, train, byol_cfg, seg_cfg, [0], train, augment_cfg, encoder_cfg)


def test_sweep_function_matches_the_harness(tmp_path: Path, harness, tiny_splits, sweep_spec, seg_cfg, augment_cfg, encoder_cfg) -> None:
    seg = seg_cfg.model_copy(update={"total_steps": 2})
    records = data_efficiency_sweep(sweep_spec, tiny_splits, tmp_path / "elsewhere", seg, augment_cfg, encoder_cfg)
    assert (tmp_path / "elsewhere" / "sweeps" / "tiny").is_dir()
    assert [r.digest() for r in records] == [r.digest() for r in harness.run(tiny_splits)]


def test_forced_rerun_rebuilds_encoders_for_a_changed_pipeline(tmp_path: Path, harness, tiny_splits, sweep_spec, seg_cfg, augment_cfg, encoder_cfg, byol_cfg) -> None:
    records = {r.key: r for r in harness.run(tiny_splits)}

    longer = sweep_spec.model_copy(update={
        "pipelines": [
            PipelineSpec(kind=PipelineKind.RANDOM_INIT),
            PipelineSpec(kind=PipelineKind.BYOL_DOMAIN, domain_ssl=byol_cfg.model_copy(update={"epochs": 2})),
        ],
    })
    seg = seg_cfg.model_copy(update={"total_steps": 2})
    changed = DataEfficiencyHarness(longer, seg, augment_cfg, encoder_cfg, tmp_path, environment={})
    assert changed.root == harness.root
    rerun = {r.key: r for r in changed.run(tiny_splits, force=True)}

    assert len(list((harness.root / ENCODER_CACHE_DIR).glob("BYOL_DOMAIN-*.pt"))) == 2
    train = tiny_splits[SplitTag.TRAIN]
    assert changed.encoder_cache_path(longer.pipelines[1], train) != harness.encoder_cache_path(sweep_spec.pipelines[1], train)
    for key, record in records.items():
        if key[0] == "BYOL_DOMAIN":
            assert rerun[key].digest() != record.digest()
        else:
            assert rerun[key].digest() == record.digest()


def test_epoch_ablation_recomputes_curves_from_another_config(tmp_path: Path, tiny_splits, tiny_encoder, byol_cfg, seg_cfg, augment_cfg, encoder_cfg, monkeypatch) -> None:
    train = tiny_splits[SplitTag.TRAIN]
    ssl = byol_cfg.model_copy(update={"epochs": 1, "checkpoint_every_epoch": True})

    def ablate(total_steps: int, seeds):
        seg = seg_cfg.model_copy(update={"total_steps": total_steps})
        return pretrain_epoch_ablation(
            tiny_encoder, train, ssl, seg, seeds, train, augment_cfg, encoder_cfg,
            subset_size=2, output_dir=tmp_path,
        )

    short = ablate(2, [0, 1])
    assert all(curve.steps == [2] for by_seed in short.curves.values() for curve in by_seed.values())

    longer = ablate(4, [0, 1])
    assert all(curve.steps == [2, 4] for by_seed in longer.curves.values() for curve in by_seed.values())
    assert load_ablation_curves(tmp_path) == longer.curves

    calls = []

    def counting(*args, **kwargs):
        calls.append(kwargs.get("seed"))
        return finetune(*args, **kwargs)

    monkeypatch.setattr(harness_service, "finetune", counting)
    again = ablate(4, [0])
    assert calls == []
    assert again.curves == {epoch: {0: by_seed[0]} for epoch, by_seed in longer.curves.items()}
    assert load_ablation_curves(tmp_path) == again.curves
    assert not list(tmp_path.glob("epoch-*/seed-1"))
