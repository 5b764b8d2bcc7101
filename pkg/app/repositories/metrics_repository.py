"""
JSON-lines metrics sink.

Rows are appended one per line with sorted keys and no timestamps, so two
runs with identical inputs produce byte-identical streams.
"""

import json
from pathlib import Path
from typing import Any, Dict, List

from app.core.logging import get_logger
from app.repositories.base import MetricsSinkBase

logger = get_logger(__name__)


class JsonlMetricsSink(MetricsSinkBase):
    """
    Append-only metric stream backed by a ``.jsonl`` file.

    Attributes:
        path: Destination file; parent directories are created.
        truncate: Start a fresh stream instead of appending.
    """

    def __init__(self, path: Path, truncate: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = self.path.open("w" if truncate else "a", encoding="utf-8")
        logger.debug("Metrics sink opened", extra={"path": str(self.path)})

    def append(self, row: Dict[str, Any]) -> None:
        self._handle.write(json.dumps(row, sort_keys=True) + "\n")
        self._handle.flush()

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self) -> "JsonlMetricsSink":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: Path) -> List[Dict[str, Any]]:
    """All rows of a metrics stream."""
    with Path(path).open(encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
