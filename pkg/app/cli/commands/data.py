"""
synth-data command.

Renders the synthetic cardiac phantom dataset and writes it in the
directory layout the loaders read.
"""

from pathlib import Path

from app.cli.dependencies import CommandContext, write_plan
from app.core.logging import get_logger
from app.repositories.dataset_repository import write_directory_dataset
from app.services.data_service import dataset_stats, generate_synthetic_dataset, split_by_patient

logger = get_logger(__name__)


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser(
        "synth-data",
        parents=parents,
        help="write a synthetic cardiac dataset directory",
    )
    parser.add_argument("--patients", type=int, help="number of synthetic patients")
    parser.add_argument("--frames", type=int, help="frames per cardiac cycle")
    parser.add_argument("--slices", type=int, help="slices per frame")
    parser.add_argument("--size", type=int, help="image side length in pixels")
    parser.add_argument("--target", type=Path, help="dataset directory (default: <out>/dataset)")
    parser.set_defaults(handler=synth_data_command)


def synth_data_command(ctx: CommandContext) -> int:
    args = ctx.args
    overrides = {
        "n_patients": args.patients,
        "frames_per_cycle": args.frames,
        "slices_per_frame": args.slices,
        "image_size": args.size,
    }
    data = ctx.config.data.model_copy(update={k: v for k, v in overrides.items() if v is not None})
    target = args.target or ctx.output_dir / "dataset"

    if ctx.dry_run:
        n_slices = data.n_patients * data.frames_per_cycle * data.slices_per_frame
        write_plan(ctx, "synth-data", [
            f"target: {target}",
            f"patients: {data.n_patients}",
            f"slices: {n_slices} ({data.frames_per_cycle} frames × {data.slices_per_frame} slices per patient)",
            f"labeled slices: {data.n_patients * 2 * data.slices_per_frame}",
            f"image size: {data.image_size}×{data.image_size}",
        ])
        return 0

    dataset = generate_synthetic_dataset(
        data.n_patients, data.frames_per_cycle, data.slices_per_frame, data.image_size, data.seed
    )
    splits = split_by_patient(dataset, data.split_fractions, data.seed)
    manifest = write_directory_dataset(splits, target, force=ctx.force)
    stats = dataset_stats(*splits.values())

    logger.info("Synthetic dataset written", extra={"manifest": str(manifest), "slices": stats.n_slices})
    print(f"dataset: {manifest.parent}")
    print(f"slices: {stats.n_slices} labeled: {stats.n_labeled} patients: {stats.n_patients}")
    print("per split: " + ", ".join(f"{k}={v}" for k, v in sorted(stats.slices_per_split.items())))
    print("class frequencies: " + ", ".join(f"{f:.4f}" for f in stats.class_frequencies))
    return 0
