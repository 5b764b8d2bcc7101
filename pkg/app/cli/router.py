"""
Command router.

Combines every command module under a single argparse parser sharing the
global flags.
"""

import argparse
from pathlib import Path

from app.cli.commands import analyze, data, experiments, train
from app.core.config import get_settings


def global_flags() -> argparse.ArgumentParser:
    """Flags accepted by every command."""
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("global options")
    group.add_argument("--config", type=Path, help="experiment configuration file (YAML)")
    group.add_argument("--seed", type=int, help="global seed (also the sweep seed)")
    group.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="force deterministic kernels",
    )
    group.add_argument("--out", type=Path, help="output directory")
    group.add_argument("--dry-run", action="store_true", help="print the resolved plan without computing")
    group.add_argument("--force", action="store_true", help="overwrite existing outputs")
    group.add_argument("--jobs", type=int, help="worker processes for parallel commands")
    return parent


def create_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(
        prog="cardioseg",
        description=(
            "Self-supervised pretraining pipelines and data-efficiency experiments "
            "for cardiac MRI segmentation."
        ),
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.app_version}")
    parser.add_argument("--log-level", help="logging level override")

    subparsers = parser.add_subparsers(dest="command", metavar="<command>", required=True)
    parents = [global_flags()]
    data.register(subparsers, parents)
    train.register(subparsers, parents)
    experiments.register(subparsers, parents)
    analyze.register(subparsers, parents)
    return parser
