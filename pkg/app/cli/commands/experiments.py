"""
Experiment commands: the data-efficiency sweep and the pretraining-epoch
ablation.
"""

import math
import sys

from app.cli.dependencies import CommandContext, get_splits, write_plan
from app.core.logging import get_logger
from app.models.dataset import SplitTag
from app.models.records import RunStatus
from app.repositories.record_repository import atomic_write_text
from app.services.analysis_service import summary_report
from app.services.figure_service import plot_ablation_curves
from app.services.harness_service import DataEfficiencyHarness, ablation_from_config

logger = get_logger(__name__)


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser("sweep", parents=parents, help="run or resume the data-efficiency sweep")
    parser.set_defaults(handler=sweep_command)

    parser = subparsers.add_parser(
        "ablate-epochs",
        parents=parents,
        help="fine-tune from every domain-pretraining epoch checkpoint",
    )
    parser.set_defaults(handler=ablate_epochs_command)


def sweep_command(ctx: CommandContext) -> int:
    cfg = ctx.config
    splits = get_splits(ctx)
    harness = DataEfficiencyHarness(
        cfg.sweep,
        cfg.seg,
        cfg.augment,
        cfg.encoder,
        ctx.output_dir,
        jobs=ctx.jobs,
        environment=ctx.environment(),
    )
    plan = harness.plan(splits[SplitTag.TRAIN])

    if ctx.dry_run:
        write_plan(ctx, "sweep", [
            plan.describe(),
            f"output: {harness.root}",
            f"subset sizes: {', '.join(map(str, plan.subset_sizes))} (of {plan.n_labeled} labeled slices)",
            f"seeds: {', '.join(map(str, plan.seeds))}",
            f"pipelines: {', '.join(plan.pipelines)}",
            f"steps per cell: {plan.total_steps} (curve points: {math.ceil(plan.total_steps / plan.eval_every_steps)})",
            f"total fine-tuning steps: {plan.total_steps * plan.n_cells}",
        ])
        return 0

    records = harness.run(splits, force=ctx.force)
    failed = [r for r in records if r.status == RunStatus.FAILED]
    atomic_write_text(harness.root / "report.md", summary_report(records))
    print(f"{plan.describe()}: {len(records) - len(failed)} done, {len(failed)} failed")
    print(f"report: {harness.root / 'report.md'}")
    if failed:
        print(f"error: {len(failed)} sweep cells failed; rerun to retry them", file=sys.stderr)
        return 1
    return 0


def ablate_epochs_command(ctx: CommandContext) -> int:
    cfg = ctx.config
    ablation = cfg.ablation
    splits = get_splits(ctx)
    train = splits[SplitTag.TRAIN]
    root = ctx.output_dir / "ablations" / ablation.name
    seg = cfg.seg.resolve(train.n_labeled)

    if ctx.dry_run:
        batch = min(cfg.byol.batch_size, max(len(train), 1))
        n_curves = (ablation.epochs + 1) * len(ablation.seeds)
        write_plan(ctx, "ablate-epochs", [
            f"output: {root}",
            f"base encoder: {ablation.base.kind.value}",
            f"domain pretraining: {ablation.epochs} epochs × {len(train) // batch} steps",
            f"seeds: {', '.join(map(str, ablation.seeds))}",
            f"downstream curves: {n_curves} ({ablation.epochs + 1} encoders × {len(ablation.seeds)} seeds)",
            f"subset size: {ablation.subset_size or train.n_labeled}",
            f"steps per curve: {seg.total_steps}",
        ])
        return 0

    result = ablation_from_config(
        ablation,
        cfg.byol,
        splits,
        cfg.seg,
        cfg.augment,
        cfg.encoder,
        ctx.output_dir,
        seed=cfg.seed,
        force=ctx.force,
    )
    plot_ablation_curves(result.curves, root)
    print(f"curves: {result.n_curves}")
    print("epoch  mean_convergence_step  converged_runs  mean_auc")
    for row in result.summary:
        print(
            f"{row['epoch']:>5}  {row['mean_convergence_step']:>21.1f}  "
            f"{row['converged_runs']:>14}  {row['mean_auc']:.4f}"
        )
    return 0
