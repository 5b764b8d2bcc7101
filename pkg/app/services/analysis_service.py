"""
Analysis of run records: learning-curve AUC, convergence steps and speedup,
power-law scaling fits, transition detection and the markdown summary.
"""

import math
from collections import defaultdict
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid

from app.core.exceptions import ArgumentError
from app.core.logging import get_logger
from app.models.records import ConvergenceEstimate, LearningCurve, RunRecord, RunStatus, ScalingFit

logger = get_logger(__name__)

TAIL_FRACTION = 0.10


def curve_auc(curve: LearningCurve, metric: str = "eval_iou") -> float:
    """
    Trapezoidal area under ``metric`` over the step axis divided by the step
    span, i.e. the mean curve height.

    Raises:
        ArgumentError: On an unknown metric or fewer than 2 points.
    """
    values = np.asarray(curve.series(metric), dtype=np.float64)
    if len(values) < 2:
        raise ArgumentError("curve_auc needs at least 2 curve points")
    steps = np.asarray(curve.steps, dtype=np.float64)
    return float(trapezoid(values, steps) / (steps[-1] - steps[0]))


def convergence_steps(
    curve: LearningCurve,
    plateau_fraction: float = 0.95,
    metric: str = "eval_iou",
) -> ConvergenceEstimate:
    """
    First recorded step at which ``metric`` reaches ``plateau_fraction`` of
    the curve's plateau (mean of its last 10% of points).

    Intended for increasing metrics such as IoU. A curve that never reaches
    the threshold reports its last step with ``converged=False``.

    Raises:
        ArgumentError: On an empty curve.
    """
    values = np.asarray(curve.series(metric), dtype=np.float64)
    if len(values) == 0:
        raise ArgumentError("convergence_steps needs a non-empty curve")
    tail = max(1, math.ceil(TAIL_FRACTION * len(values)))
    plateau = float(values[-tail:].mean())
    threshold = plateau_fraction * plateau
    reached = np.nonzero(values >= threshold)[0]
    if len(reached) == 0:
        return ConvergenceEstimate(step=curve.steps[-1], converged=False, plateau=plateau)
    return ConvergenceEstimate(step=curve.steps[int(reached[0])], converged=True, plateau=plateau)


def speedup_ratio(
    reference_curves: Sequence[LearningCurve],
    candidate_curves: Sequence[LearningCurve],
    plateau_fraction: float = 0.95,
) -> float:
    """
    Mean convergence step of the reference curves divided by that of the
    candidate curves; > 1 means the candidate converges faster.
    """
    if not reference_curves or not candidate_curves:
        raise ArgumentError("speedup_ratio needs curves on both sides")
    reference = np.mean([convergence_steps(c, plateau_fraction).step for c in reference_curves])
    candidate = np.mean([convergence_steps(c, plateau_fraction).step for c in candidate_curves])
    return float(reference / candidate)


def fit_power_law(
    sizes: Sequence[float],
    errors: Sequence[float],
    fit_range: Optional[Tuple[float, float]] = None,
) -> ScalingFit:
    """
    Least-squares fit of ``log e = log c - alpha * log n``.

    Args:
        sizes: Training-set sizes.
        errors: Test errors at those sizes.
        fit_range: Inclusive ``(n_min, n_max)`` restricting the points used.

    Raises:
        ArgumentError: On non-positive values, mismatched lengths or fewer
            than 2 in-range points.
    """
    n = np.asarray(sizes, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    if n.shape != e.shape:
        raise ArgumentError("sizes and errors must have equal lengths")
    if fit_range is not None:
        keep = (n >= fit_range[0]) & (n <= fit_range[1])
        n, e = n[keep], e[keep]
    if len(n) < 2:
        raise ArgumentError("fit_power_law needs at least 2 in-range points")
    if (n <= 0).any() or (e <= 0).any():
        raise ArgumentError("fit_power_law needs strictly positive sizes and errors")

    log_n, log_e = np.log(n), np.log(e)
    slope, intercept = np.polyfit(log_n, log_e, 1)
    predicted = slope * log_n + intercept
    ss_res = float(((log_e - predicted) ** 2).sum())
    ss_tot = float(((log_e - log_e.mean()) ** 2).sum())
    r_squared = 1.0 if ss_tot <= 1e-300 else 1.0 - ss_res / ss_tot

    return ScalingFit(
        exponent=float(-slope),
        intercept=float(np.exp(intercept)),
        r_squared=float(np.clip(r_squared, 0.0, 1.0)),
        fit_range=(float(n.min()), float(n.max())),
        n_points=len(n),
    )


def local_slopes(sizes: Sequence[float], errors: Sequence[float]) -> np.ndarray:
    """Log-log slope between each pair of consecutive points."""
    log_n = np.log(np.asarray(sizes, dtype=np.float64))
    log_e = np.log(np.asarray(errors, dtype=np.float64))
    return np.diff(log_e) / np.diff(log_n)


def detect_transition(
    sizes: Sequence[float],
    errors: Sequence[float],
    slope_ratio_threshold: float = 0.5,
) -> Optional[Tuple[float, float]]:
    """
    Heuristic location of the end of the power-law region.

    The reference slope is the median local slope within the smallest third
    of the sizes; the transition is the first consecutive pair whose local
    slope magnitude drops below ``slope_ratio_threshold`` times it.

    Returns:
        ``(n_low, n_high)`` from the input grid, or None.

    Raises:
        ArgumentError: On fewer than 4 points, unsorted sizes or
            non-positive values.
    """
    n = np.asarray(sizes, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    if len(n) < 4 or len(e) != len(n):
        raise ArgumentError("detect_transition needs at least 4 (size, error) points")
    if (np.diff(n) <= 0).any():
        raise ArgumentError("detect_transition needs strictly ascending sizes")
    if (n <= 0).any() or (e <= 0).any():
        raise ArgumentError("detect_transition needs strictly positive values")

    slopes = local_slopes(n, e)
    head = max(1, math.ceil(len(n) / 3) - 1)
    reference = abs(float(np.median(slopes[:head])))
    if reference == 0.0:
        return None
    for i, slope in enumerate(slopes):
        if abs(slope) < slope_ratio_threshold * reference:
            return (sizes[i], sizes[i + 1])
    return None


# ----- Record aggregation -----


def done_records(records: Iterable[RunRecord]) -> List[RunRecord]:
    return [r for r in records if r.status == RunStatus.DONE]


def group_records(records: Iterable[RunRecord]) -> Dict[Tuple[str, int], List[RunRecord]]:
    """DONE records grouped by (pipeline, subset size), keys sorted."""
    groups: Dict[Tuple[str, int], List[RunRecord]] = defaultdict(list)
    for record in done_records(records):
        groups[(record.pipeline, record.subset_size)].append(record)
    return {key: sorted(groups[key], key=lambda r: r.seed) for key in sorted(groups)}


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    array = np.asarray(values, dtype=np.float64)
    std = float(array.std(ddof=1)) if len(array) > 1 else 0.0
    return float(array.mean()), std


def _fmt(mean: float, std: float) -> str:
    return f"{mean:.4f} ± {std:.4f}"


SUMMARY_HEADER = (
    "| pipeline | subset size | runs | test loss | test IoU | curve AUC | convergence step |\n"
    "|---|---|---|---|---|---|---|"
)


def summary_rows(records: Iterable[RunRecord]) -> List[Dict[str, float]]:
    """Per (pipeline, size) aggregates in deterministic order."""
    rows = []
    for (pipeline, size), group in group_records(records).items():
        losses = [r.test_loss for r in group if r.test_loss is not None]
        ious = [r.test_iou for r in group if r.test_iou is not None]
        curves = [r.curve for r in group if len(r.curve) >= 2]
        rows.append({
            "pipeline": pipeline,
            "subset_size": size,
            "runs": len(group),
            "test_loss": _mean_std(losses) if losses else (math.nan, math.nan),
            "test_iou": _mean_std(ious) if ious else (math.nan, math.nan),
            "auc": _mean_std([curve_auc(c) for c in curves]) if curves else (math.nan, math.nan),
            "convergence": (
                _mean_std([convergence_steps(c).step for c in curves]) if curves else (math.nan, math.nan)
            ),
        })
    return rows


def scaling_fits(records: Iterable[RunRecord]) -> Dict[str, Tuple[Optional[ScalingFit], Optional[Tuple]]]:
    """Per pipeline: power-law fit of mean test loss over size, and the transition."""
    by_pipeline: Dict[str, List[Tuple[int, float]]] = defaultdict(list)
    for (pipeline, size), group in group_records(records).items():
        losses = [r.test_loss for r in group if r.test_loss is not None and r.test_loss > 0]
        if losses:
            by_pipeline[pipeline].append((size, float(np.mean(losses))))

    fits = {}
    for pipeline in sorted(by_pipeline):
        points = sorted(by_pipeline[pipeline])
        sizes = [p[0] for p in points]
        errors = [p[1] for p in points]
        fit = fit_power_law(sizes, errors) if len(points) >= 2 else None
        transition = detect_transition(sizes, errors) if len(points) >= 4 else None
        fits[pipeline] = (fit, transition)
    return fits


def summary_report(records: Iterable[RunRecord]) -> str:
    """
    Markdown report: one row per (pipeline, subset size) with test loss,
    test IoU, curve AUC and convergence step as mean ± std over seeds,
    followed by the per-pipeline scaling fits.
    """
    records = list(records)
    lines = ["# Data-efficiency summary", "", SUMMARY_HEADER]
    for row in summary_rows(records):
        lines.append(
            f"| {row['pipeline']} | {row['subset_size']} | {row['runs']} | "
            f"{_fmt(*row['test_loss'])} | {_fmt(*row['test_iou'])} | "
            f"{_fmt(*row['auc'])} | {row['convergence'][0]:.1f} ± {row['convergence'][1]:.1f} |"
        )

    fits = scaling_fits(records)
    if fits:
        lines += [
            "",
            "## Scaling fits (test loss ~ c · n^-alpha)",
            "",
            "| pipeline | alpha | c | r² | points | transition |",
            "|---|---|---|---|---|---|",
        ]
        for pipeline, (fit, transition) in fits.items():
            if fit is None:
                lines.append(f"| {pipeline} | - | - | - | 1 | - |")
                continue
            where = f"{transition[0]}–{transition[1]}" if transition else "none"
            lines.append(
                f"| {pipeline} | {fit.exponent:.4f} | {fit.intercept:.4f} | "
                f"{fit.r_squared:.4f} | {fit.n_points} | {where} |"
            )

    failed = [r for r in records if r.status != RunStatus.DONE]
    if failed:
        lines += ["", f"{len(failed)} failed run(s) excluded."]
    return "\n".join(lines) + "\n"
