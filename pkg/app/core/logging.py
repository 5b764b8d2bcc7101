"""
Logging configuration for the application.

Provides structured logging with configurable levels and formatters. Context
passed through ``extra={...}`` is rendered after the message as ``key=value``
pairs, so seeds, steps and paths show up in the run logs.
"""

import logging
import sys
from typing import Optional

from app.core.config import get_settings

_RESERVED = frozenset(logging.makeLogRecord({}).__dict__) | {"message", "asctime"}


class ContextFormatter(logging.Formatter):
    """Formatter that appends a record's ``extra`` fields to the message."""

    def format(self, record: logging.LogRecord) -> str:
        line = super().format(record)
        context = {k: v for k, v in record.__dict__.items() if k not in _RESERVED and not k.startswith("_")}
        if not context:
            return line
        rendered = " ".join(f"{key}={value}" for key, value in sorted(context.items()))
        return f"{line} | {rendered}"


def setup_logging(level: Optional[str] = None) -> logging.Logger:
    """
    Configure and return the application logger.

    Args:
        level: Optional logging level override. Defaults to the configured
               log level, or DEBUG in debug mode.

    Returns:
        Configured logger instance for the application.
    """
    settings = get_settings()

    if level:
        log_level = getattr(logging, level.upper(), logging.INFO)
    elif settings.debug:
        log_level = logging.DEBUG
    else:
        log_level = getattr(logging, settings.log_level.upper(), logging.INFO)

    formatter = ContextFormatter(
        fmt="%(asctime)s | %(levelname)-8s | %(name)s:%(funcName)s:%(lineno)d - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(formatter)
    handler.setLevel(log_level)

    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)

    # Remove existing handlers to avoid duplicates
    root_logger.handlers.clear()
    root_logger.addHandler(handler)

    logger = logging.getLogger("cardioseg")
    logger.setLevel(log_level)

    # Reduce noise from third-party libraries
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)

    logger.debug(
        "Logging configured",
        extra={"level": logging.getLevelName(log_level), "debug": settings.debug},
    )

    return logger


def get_logger(name: str) -> logging.Logger:
    """
    Get a logger instance for a specific module.

    Args:
        name: The name for the logger, typically __name__ of the calling module.

    Returns:
        Logger instance with the specified name.
    """
    return logging.getLogger(f"cardioseg.{name}")
