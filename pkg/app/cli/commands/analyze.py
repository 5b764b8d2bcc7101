"""
analyze command: summary report and figures from stored run records.
"""

from pathlib import Path

from app.cli.dependencies import CommandContext, write_plan
from app.core.exceptions import ArgumentError
from app.core.logging import get_logger
from app.repositories.record_repository import atomic_write_text, load_records_tree
from app.services.analysis_service import done_records, summary_report
from app.services.figure_service import emit_figures
from app.services.harness_service import load_ablation_curves

logger = get_logger(__name__)


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser("analyze", parents=parents, help="summarize a sweep and emit figures")
    parser.add_argument(
        "records_dir",
        type=Path,
        nargs="?",
        help="run-record tree (default: <out>/sweeps/<sweep.name>)",
    )
    parser.add_argument("--ablation", type=Path, help="ablation output directory to include")
    parser.set_defaults(handler=analyze_command)


def analyze_command(ctx: CommandContext) -> int:
    records_dir = ctx.args.records_dir or ctx.output_dir / "sweeps" / ctx.config.sweep.name
    if not records_dir.is_dir():
        raise ArgumentError(f"Records directory not found: {records_dir}")
    records = load_records_tree(records_dir)
    if not records:
        raise ArgumentError(f"No run records under {records_dir}")
    out_dir = ctx.output_dir / "analysis" / records_dir.name

    if ctx.dry_run:
        write_plan(ctx, "analyze", [
            f"records: {len(records)} ({len(done_records(records))} done) from {records_dir}",
            f"output: {out_dir}",
        ])
        return 0

    report = out_dir / "report.md"
    atomic_write_text(report, summary_report(records))
    ablation = load_ablation_curves(ctx.args.ablation) if ctx.args.ablation else None
    figures = emit_figures(records, out_dir / "figures", ablation_curves=ablation)
    logger.info("Analysis written", extra={"report": str(report), "figures": len(figures)})
    print(f"report: {report}")
    for path in figures:
        print(f"figure: {path}")
    return 0
