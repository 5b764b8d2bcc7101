"""
Error handling for command execution.

Converts application errors into a single-line diagnostic on stderr and the
error class's process exit code.
"""

import sys
from typing import Callable

from app.core.exceptions import CardioSegError, TrainingDivergedError
from app.core.logging import get_logger

logger = get_logger(__name__)


def run_with_error_handling(handler: Callable[[], int], command: str) -> int:
    """
    Run a command handler and map failures to exit codes.

    Args:
        handler: Zero-argument callable returning the exit status.
        command: Command name, for log context.

    Returns:
        The handler's status, the error's ``exit_code`` for application
        errors, or 1 for anything unexpected.
    """
    try:
        return handler()
    except CardioSegError as e:
        extra = {"command": command, "exit_code": e.exit_code}
        if isinstance(e, TrainingDivergedError):
            extra["snapshot"] = e.snapshot
        logger.error(f"Command failed: {e.detail}", extra=extra)
        print(f"error: {type(e).__name__}: {' '.join(e.detail.split())}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as e:
        logger.exception(f"Unexpected error: {e}", extra={"command": command})
        print(f"error: unexpected {type(e).__name__}: {' '.join(str(e).split())}", file=sys.stderr)
        return 1
