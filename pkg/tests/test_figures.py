from pathlib import Path

import numpy as np
import pytest

from app.core.exceptions import ArgumentError
from app.models.records import LearningCurve, RunStatus
from app.models.schemas import PipelineKind
from app.services.figure_service import (
    auc_order,
    curve_band,
    emit_figures,
    pipeline_color,
    plot_ablation_curves,
)


@pytest.fixture
def records(make_record):
    out = []
    for pipeline, slope in (("RANDOM_INIT", 0.1), ("BYOL_DOMAIN", 0.3), ("SUP_IMAGENET", 0.2)):
        for size in (1, 4):
            for seed in (0, 1, 2):
                out.append(make_record(pipeline, size, seed, test_loss=0.5 / size + 0.01 * seed, slope=slope + 0.01 * seed))
    return out


def test_every_figure_is_written_in_both_formats(tmp_path: Path, records) -> None:
    paths = emit_figures(records, tmp_path / "figures")
    names = sorted(p.name for p in paths)
    assert names == sorted(
        f"{stem}.{fmt}"
        for stem in ("learning_curves", "auc_distribution", "test_loss_vs_size")
        for fmt in ("svg", "png")
    )
    assert all(p.is_file() and p.stat().st_size > 0 for p in paths)


def test_ablation_figure_is_optional(tmp_path: Path, records) -> None:
    curves = {
        epoch: {seed: LearningCurve([10, 20], [0.5, 0.4], [0.1 * epoch, 0.2 * epoch], [0.6, 0.5]) for seed in (0, 1)}
        for epoch in range(3)
    }
    paths = emit_figures(records, tmp_path, ablation_curves=curves)
    assert (tmp_path / "ablation_curves.svg") in paths
    assert len(plot_ablation_curves(curves, tmp_path)) == 2


def test_figures_need_completed_runs(tmp_path: Path, records) -> None:
    for record in records:
        record.status = RunStatus.FAILED
    with pytest.raises(ArgumentError):
        emit_figures(records, tmp_path)
    with pytest.raises(ArgumentError):
        emit_figures([], tmp_path)


def test_curve_band_statistics() -> None:
    a = LearningCurve([1, 2, 3], [0.0] * 3, [0.2, 0.4, 0.6], [0.0] * 3)
    b = LearningCurve([1, 2], [0.0] * 2, [0.4, 0.6], [0.0] * 2)
    steps, mean, std = curve_band([a])
    np.testing.assert_array_equal(std, 0.0)
    np.testing.assert_allclose(mean, [0.2, 0.4, 0.6])
    steps, mean, std = curve_band([a, b])
    assert list(steps) == [1, 2]
    np.testing.assert_allclose(mean, [0.3, 0.5])
    np.testing.assert_allclose(std, [np.sqrt(0.02), np.sqrt(0.02)])
    with pytest.raises(ArgumentError):
        curve_band([])


def test_auc_order_is_ascending_by_median(records) -> None:
    assert auc_order(records) == ["RANDOM_INIT", "SUP_IMAGENET", "BYOL_DOMAIN"]


def test_pipeline_colors_are_stable_and_distinct() -> None:
    colors = [pipeline_color(kind.value) for kind in PipelineKind]
    assert len(set(colors)) == len(colors)
    assert pipeline_color("custom") == pipeline_color("custom")
    assert pipeline_color("custom") not in colors
