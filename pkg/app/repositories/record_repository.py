"""
Filesystem implementation of the run-record repository.

One self-describing JSON file per sweep cell under
``<root>/<pipeline>/<subset_size>/<seed>/record.json``; the index is rebuilt
by scanning the tree, so concurrent writers never contend on shared files.
"""

import json
import os
import tempfile
from pathlib import Path
from typing import List, Tuple

from app.core.exceptions import DatasetFormatError
from app.core.logging import get_logger
from app.models.records import RunRecord
from app.repositories.base import RunRecordRepositoryBase

logger = get_logger(__name__)

RECORD_FILENAME = "record.json"


def atomic_write_text(path: Path, text: str) -> None:
    """Write via a sibling temp file and ``os.replace``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


class FileRunRecordRepository(RunRecordRepositoryBase):
    """
    Record store rooted at a sweep directory.

    Attributes:
        root: Sweep directory (``sweeps/<name>``).
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: Tuple[str, int, int]) -> Path:
        pipeline, subset_size, seed = key
        return self.root / pipeline / str(subset_size) / str(seed) / RECORD_FILENAME

    def save(self, record: RunRecord) -> None:
        path = self._path(record.key)
        atomic_write_text(path, json.dumps(record.to_dict(), indent=2, sort_keys=True))
        logger.debug(
            "Saved run record",
            extra={"key": record.key, "status": record.status.value},
        )

    def get(self, key: Tuple[str, int, int]) -> RunRecord:
        path = self._path(key)
        if not path.is_file():
            raise KeyError(key)
        return self._read(path)

    def exists(self, key: Tuple[str, int, int]) -> bool:
        return self._path(key).is_file()

    def list_records(self) -> List[RunRecord]:
        records = [self._read(path) for path in self.root.glob(f"*/*/*/{RECORD_FILENAME}")]
        return sorted(records, key=lambda r: r.key)

    def delete(self, key: Tuple[str, int, int]) -> bool:
        path = self._path(key)
        if not path.is_file():
            return False
        path.unlink()
        logger.info("Deleted run record", extra={"key": key})
        return True

    @staticmethod
    def _read(path: Path) -> RunRecord:
        try:
            return RunRecord.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (ValueError, KeyError) as e:
            raise DatasetFormatError(f"Unreadable run record {path}: {e}")


def load_records_tree(root: Path) -> List[RunRecord]:
    """Every record under ``root``, whether it is one sweep or a tree of sweeps."""
    root = Path(root)
    records = [
        FileRunRecordRepository._read(path) for path in sorted(root.rglob(RECORD_FILENAME))
    ]
    return sorted(records, key=lambda r: r.key)
