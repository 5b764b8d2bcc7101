"""
Abstract repository interfaces.

Defines the contracts for run-record storage and metric sinks, so services
depend on these abstractions rather than on the filesystem layout.
"""

from abc import ABC, abstractmethod
from typing import Any, Dict, List, Tuple

from app.models.records import RunRecord


class RunRecordRepositoryBase(ABC):
    """
    Abstract base class for sweep record stores.

    Every implementation must make ``save`` atomic per record, so concurrent
    writers never leave a partially written cell behind.
    """

    @abstractmethod
    def save(self, record: RunRecord) -> None:
        """
        Persist one record, replacing an existing record with the same key.

        Raises:
            CardioSegError: If the store cannot be written.
        """
        pass

    @abstractmethod
    def get(self, key: Tuple[str, int, int]) -> RunRecord:
        """
        Load the record for ``(pipeline, subset_size, seed)``.

        Raises:
            KeyError: If no record exists for the key.
        """
        pass

    @abstractmethod
    def exists(self, key: Tuple[str, int, int]) -> bool:
        """Whether a record exists for the key."""
        pass

    @abstractmethod
    def list_records(self) -> List[RunRecord]:
        """All records, ordered by key."""
        pass

    @abstractmethod
    def delete(self, key: Tuple[str, int, int]) -> bool:
        """Remove a record; returns whether one existed."""
        pass


class MetricsSinkBase(ABC):
    """Append-only destination for metric rows."""

    @abstractmethod
    def append(self, row: Dict[str, Any]) -> None:
        """Append one row."""
        pass

    def close(self) -> None:
        """Flush and release resources."""


class NullMetricsSink(MetricsSinkBase):
    """Sink that discards every row."""

    def append(self, row: Dict[str, Any]) -> None:
        pass
