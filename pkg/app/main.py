"""
Command-line application factory.

Builds the parser, configures logging and dispatches to the selected command
through the error-handling middleware.
"""

from typing import Optional, Sequence

from app.cli.dependencies import get_context
from app.cli.middleware import run_with_error_handling
from app.cli.router import create_parser
from app.core.config import get_settings
from app.core.logging import get_logger, setup_logging

logger = get_logger(__name__)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse ``argv`` and run the selected command.

    Returns:
        Process exit status.
    """
    parser = create_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    settings = get_settings()
    logger.info(
        f"Starting {settings.app_name} v{settings.app_version}",
        extra={"command": args.command, "debug": settings.debug},
    )
    return run_with_error_handling(lambda: args.handler(get_context(args)), args.command)
