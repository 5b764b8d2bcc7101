"""
Figure emission for sweep and ablation results.

Every figure is written as SVG and PNG; each pipeline keeps one colour across
all figures.
"""

from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.core.exceptions import ArgumentError  # noqa: E402
from app.core.logging import get_logger  # noqa: E402
from app.models.records import LearningCurve, RunRecord  # noqa: E402
from app.models.schemas import PipelineKind  # noqa: E402
from app.services.analysis_service import curve_auc, done_records  # noqa: E402

logger = get_logger(__name__)

_PALETTE = plt.get_cmap("tab10").colors
PIPELINE_COLORS: Dict[str, Tuple[float, float, float]] = {
    kind.value: _PALETTE[i] for i, kind in enumerate(PipelineKind)
}
FIGURE_FORMATS = ("svg", "png")


def pipeline_color(pipeline: str):
    if pipeline in PIPELINE_COLORS:
        return PIPELINE_COLORS[pipeline]
    # names outside PipelineKind share the spare palette slots
    spare = _PALETTE[len(PIPELINE_COLORS):]
    return spare[sum(map(ord, pipeline)) % len(spare)]


def pipeline_label(pipeline: str) -> str:
    try:
        return PipelineKind(pipeline).label
    except ValueError:
        return pipeline


def _savefig(fig, out_dir: Path, name: str) -> List[Path]:
    paths = []
    for fmt in FIGURE_FORMATS:
        path = out_dir / f"{name}.{fmt}"
        fig.savefig(path, bbox_inches="tight", dpi=150)
        paths.append(path)
    plt.close(fig)
    return paths


def curve_band(curves: Sequence[LearningCurve], metric: str = "eval_iou") -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Mean and sample standard deviation across curves at each step.

    Curves are truncated to their common length; a single curve has zero
    width.
    """
    if not curves:
        raise ArgumentError("curve_band needs at least one curve")
    length = min(len(c) for c in curves)
    values = np.array([c.series(metric)[:length] for c in curves], dtype=np.float64)
    steps = np.asarray(curves[0].steps[:length])
    std = values.std(axis=0, ddof=1) if len(curves) > 1 else np.zeros(length)
    return steps, values.mean(axis=0), std


def auc_order(records: Sequence[RunRecord]) -> List[str]:
    """Pipelines sorted by median curve AUC, ascending (ties by name)."""
    aucs = auc_values(records)
    return sorted(aucs, key=lambda p: (float(np.median(aucs[p])), p))


def auc_values(records: Sequence[RunRecord]) -> Dict[str, List[float]]:
    values: Dict[str, List[float]] = {}
    for record in records:
        if len(record.curve) >= 2:
            values.setdefault(record.pipeline, []).append(curve_auc(record.curve))
    return values


def _largest_size_records(records: Sequence[RunRecord]) -> List[RunRecord]:
    largest: Dict[str, int] = {}
    for record in records:
        largest[record.pipeline] = max(largest.get(record.pipeline, 0), record.subset_size)
    return [r for r in records if r.subset_size == largest[r.pipeline]]


def plot_learning_curves(records: Sequence[RunRecord], out_dir: Path) -> List[Path]:
    """Mean ± std eval-IoU bands per pipeline at its largest subset size."""
    fig, ax = plt.subplots(figsize=(6, 4))
    by_pipeline: Dict[str, List[LearningCurve]] = {}
    for record in _largest_size_records(records):
        if len(record.curve):
            by_pipeline.setdefault(record.pipeline, []).append(record.curve)
    for pipeline in sorted(by_pipeline):
        steps, mean, std = curve_band(by_pipeline[pipeline])
        color = pipeline_color(pipeline)
        ax.plot(steps, mean, color=color, label=pipeline_label(pipeline))
        ax.fill_between(steps, mean - std, mean + std, color=color, alpha=0.25, linewidth=0)
    ax.set_xlabel("Step")
    ax.set_ylabel("Eval IoU")
    ax.legend(fontsize="small")
    return _savefig(fig, out_dir, "learning_curves")


def plot_auc_distribution(records: Sequence[RunRecord], out_dir: Path) -> List[Path]:
    """Violins of curve AUC ordered by median; point markers for single runs."""
    subset = _largest_size_records(records)
    aucs = auc_values(subset)
    order = auc_order(subset)
    fig, ax = plt.subplots(figsize=(6, 4))
    for x, pipeline in enumerate(order, start=1):
        values = aucs[pipeline]
        color = pipeline_color(pipeline)
        if len(values) > 1 and np.ptp(values) > 0:
            parts = ax.violinplot([values], positions=[x], showmedians=True)
            for body in parts["bodies"]:
                body.set_facecolor(color)
                body.set_alpha(0.6)
        else:
            ax.plot([x] * len(values), values, "o", color=color)
    ax.set_xticks(range(1, len(order) + 1))
    ax.set_xticklabels([pipeline_label(p) for p in order], rotation=30, ha="right", fontsize="small")
    ax.set_ylabel("Curve AUC (eval IoU)")
    return _savefig(fig, out_dir, "auc_distribution")


def plot_test_loss_vs_size(records: Sequence[RunRecord], out_dir: Path) -> List[Path]:
    """Grouped box plots of final test loss per subset size on log-log axes."""
    pipelines = sorted({r.pipeline for r in records})
    sizes = sorted({r.subset_size for r in records})
    width = 0.8 / max(len(pipelines), 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    for j, pipeline in enumerate(pipelines):
        data, positions = [], []
        for i, size in enumerate(sizes):
            losses = [
                r.test_loss for r in records
                if r.pipeline == pipeline and r.subset_size == size and r.test_loss is not None
            ]
            if losses:
                data.append(losses)
                # offset in log space so groups stay side by side
                positions.append(size * 10 ** ((j - (len(pipelines) - 1) / 2) * width * 0.15))
        if not data:
            continue
        color = pipeline_color(pipeline)
        parts = ax.boxplot(
            data,
            positions=positions,
            widths=[p * 0.08 for p in positions],
            patch_artist=True,
            manage_ticks=False,
        )
        for box in parts["boxes"]:
            box.set_facecolor(color)
            box.set_alpha(0.6)
        ax.plot([], [], "s", color=color, label=pipeline_label(pipeline))
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("Labeled training slices")
    ax.set_ylabel("Test Jaccard loss")
    ax.legend(fontsize="small")
    return _savefig(fig, out_dir, "test_loss_vs_size")


def plot_ablation_curves(curves: Mapping[int, Mapping[int, LearningCurve]], out_dir: Path) -> List[Path]:
    """Mean eval-IoU curve per domain-pretraining epoch."""
    fig, ax = plt.subplots(figsize=(6, 4))
    cmap = plt.get_cmap("viridis")
    epochs = sorted(curves)
    for k, epoch in enumerate(epochs):
        steps, mean, _ = curve_band(list(curves[epoch].values()))
        ax.plot(steps, mean, color=cmap(k / max(len(epochs) - 1, 1)), label=f"epoch {epoch}")
    ax.set_xlabel("Step")
    ax.set_ylabel("Eval IoU")
    ax.legend(fontsize="small", ncol=2)
    return _savefig(fig, out_dir, "ablation_curves")


def emit_figures(
    records: Sequence[RunRecord],
    out_dir: Path,
    ablation_curves: Optional[Mapping[int, Mapping[int, LearningCurve]]] = None,
) -> List[Path]:
    """
    Write every sweep figure (and the ablation figure when given).

    Returns:
        Written file paths.

    Raises:
        ArgumentError: If no DONE records are given.
    """
    records = done_records(records)
    if not records:
        raise ArgumentError("emit_figures needs at least one completed run record")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    paths = plot_learning_curves(records, out_dir)
    paths += plot_auc_distribution(records, out_dir)
    paths += plot_test_loss_vs_size(records, out_dir)
    if ablation_curves:
        paths += plot_ablation_curves(ablation_curves, out_dir)
    logger.info("Emitted figures", extra={"out_dir": str(out_dir), "files": len(paths)})
    return paths
