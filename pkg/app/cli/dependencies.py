"""
Command dependency factories.

Resolves the experiment configuration with flag overrides, builds datasets,
and provides the dry-run plan writer shared by every command.
"""

import argparse
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

from app.core.config import Settings, dump_experiment_config, get_settings, load_experiment_config
from app.core.exceptions import ConfigurationError
from app.core.logging import get_logger
from app.core.seeding import set_determinism
from app.models.dataset import SemiSupervisedDataset, SplitTag
from app.models.schemas import ExperimentConfig
from app.repositories.dataset_repository import load_directory_splits
from app.services.data_service import generate_synthetic_dataset, split_by_patient
from app.services.pipeline_service import environment_info

logger = get_logger(__name__)


@dataclass
class CommandContext:
    """
    Everything a command handler needs.

    Attributes:
        args: Parsed command-line arguments.
        config: Experiment configuration with flag overrides applied.
        settings: Process settings from the environment.
        output_dir: Resolved output directory.
        dry_run: Print the plan instead of computing.
        force: Allow overwriting existing outputs.
        jobs: Worker processes for parallel commands.
    """

    args: argparse.Namespace
    config: ExperimentConfig
    settings: Settings
    output_dir: Path
    dry_run: bool
    force: bool
    jobs: int

    @property
    def data_root(self) -> Optional[Path]:
        return self.config.data.root or self.settings.data_root

    def environment(self) -> Dict:
        """Provenance environment; the data root is echoed when directory data is used."""
        root = self.data_root if self.config.data.source == "directory" else None
        return environment_info(root)


def apply_overrides(config: ExperimentConfig, args: argparse.Namespace, settings: Settings) -> ExperimentConfig:
    """Flags win over the environment, which wins over the file."""
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
        updates["sweep"] = config.sweep.model_copy(update={"sweep_seed": args.seed})
    deterministic = getattr(args, "deterministic", None)
    if deterministic is None:
        deterministic = settings.deterministic
    if deterministic is not None:
        updates["deterministic"] = deterministic
    out = getattr(args, "out", None) or settings.output_dir
    if out is not None:
        updates["output_dir"] = Path(out)
    jobs = getattr(args, "jobs", None)
    if jobs is None:
        jobs = settings.jobs
    if jobs is not None:
        if jobs < 1:
            raise ConfigurationError(f"--jobs must be >= 1, got {jobs}")
        updates["jobs"] = jobs
    return config.model_copy(update=updates)


def get_context(args: argparse.Namespace) -> CommandContext:
    """
    Build the command context from flags, environment and config file.

    Raises:
        ConfigurationError: On config file errors.
    """
    settings = get_settings()
    config = apply_overrides(load_experiment_config(getattr(args, "config", None)), args, settings)
    dry_run = bool(getattr(args, "dry_run", False))
    if not dry_run:
        set_determinism(config.deterministic)
    return CommandContext(
        args=args,
        config=config,
        settings=settings,
        output_dir=Path(config.output_dir),
        dry_run=dry_run,
        force=bool(getattr(args, "force", False)),
        jobs=config.jobs,
    )


def get_splits(ctx: CommandContext) -> Dict[SplitTag, SemiSupervisedDataset]:
    """
    Patient-level splits of the configured data source.

    Synthetic data is rendered in memory from the data section; directory
    data is read from ``data.root`` or the data-root setting.

    Raises:
        ConfigurationError: If directory data has no root.
    """
    data = ctx.config.data
    if data.source == "directory":
        if ctx.data_root is None:
            raise ConfigurationError("data.source is 'directory' but no data root is configured")
        logger.info("Using directory dataset", extra={"data_root": str(ctx.data_root)})
        return load_directory_splits(ctx.data_root)
    dataset = generate_synthetic_dataset(
        data.n_patients, data.frames_per_cycle, data.slices_per_frame, data.image_size, data.seed
    )
    return split_by_patient(dataset, data.split_fractions, data.seed)


def write_plan(ctx: CommandContext, command: str, lines) -> Path:
    """
    Print a dry-run plan and save it to a temporary file, the only write a
    dry run performs.
    """
    text = "\n".join([f"# {command} plan", *lines, "", "# resolved configuration", dump_experiment_config(ctx.config)])
    with tempfile.NamedTemporaryFile(
        "w", prefix=f"cardioseg-{command}-", suffix=".plan.txt", delete=False, encoding="utf-8"
    ) as handle:
        handle.write(text)
    for line in lines:
        print(line)
    print(f"plan written to {handle.name}")
    return Path(handle.name)
